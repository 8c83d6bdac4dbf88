//! Built-in equivalence suites run by `p3d selftest`.

use std::fmt;

use crate::conv::{conv3d, conv3d_ref, conv_pointwise, conv_spatial, conv_temporal, ConvWeights, KernelSpec};
use crate::error::Result;
use crate::network::{build_network, ArchSpec, BlockPolicy, InitRule, NetworkGraph, TemporalInit, Widths};
use crate::params::{ParamKind, Params};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::ClipTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub max_err: f64,
    pub tolerance: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} case(s), max abs err {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_err,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvFamily {
    Spatial,
    Temporal,
    Pointwise,
    Full,
}

/// A random valid convolution problem of the given family.
pub fn random_conv_case<T: Real>(family: ConvFamily, rng: &mut SplitMix64) -> Result<(ClipTensor<T>, ConvWeights<T>, KernelSpec)> {
    let pick = |rng: &mut SplitMix64, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
    let (d, k) = match family {
        ConvFamily::Spatial => (1, pick(rng, 1, 4)),
        ConvFamily::Temporal => (pick(rng, 1, 4), 1),
        ConvFamily::Pointwise => (1, 1),
        ConvFamily::Full => (pick(rng, 1, 3), pick(rng, 1, 3)),
    };
    let (ci, co) = (pick(rng, 1, 4), pick(rng, 1, 4));
    let pad_t = if d > 1 { rng.below(d) } else { 0 };
    let pad_s = if k > 1 { rng.below(k) } else { 0 };
    let (stride_t, stride_s) = match family {
        ConvFamily::Spatial => (1, pick(rng, 1, 2)),
        ConvFamily::Temporal => (pick(rng, 1, 2), 1),
        _ => (pick(rng, 1, 2), pick(rng, 1, 2)),
    };
    let spec = KernelSpec::new(ci, co, d, k)
        .with_stride(stride_t, stride_s)
        .with_padding(pad_t, pad_s);
    let n = pick(rng, 1, 2);
    let t = pick(rng, d.saturating_sub(2 * pad_t).max(1), 6);
    let h = pick(rng, k.saturating_sub(2 * pad_s).max(1), 7);
    let w = pick(rng, k.saturating_sub(2 * pad_s).max(1), 7);
    let x = ClipTensor::uniform([n, ci, t, h, w], -1.0, 1.0, rng.next_u64())?;
    let wt = ConvWeights::uniform(&spec, -1.0, 1.0, rng.next_u64())?;
    Ok((x, wt, spec))
}

/// Largest deviation from the naive oracle over `cases` random problems.
pub fn oracle_gap<T: Real>(family: ConvFamily, seed: u64, cases: usize) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut max_err = 0.0f64;
    for _ in 0..cases {
        let (x, w, spec) = random_conv_case::<T>(family, &mut rng)?;
        let got = match family {
            ConvFamily::Spatial => conv_spatial(&x, &w, &spec)?,
            ConvFamily::Temporal => conv_temporal(&x, &w, &spec)?,
            ConvFamily::Pointwise => conv_pointwise(&x, &w, &spec)?,
            ConvFamily::Full => conv3d(&x, &w, &spec)?,
        };
        max_err = max_err.max(got.max_abs_diff(&conv3d_ref(&x, &w, &spec)?)?);
    }
    Ok(max_err)
}

/// The factorized operators against the naive oracle in f64 at 1e-6, and
/// the f32 lowered 3D path at 1e-5.
pub fn oracle_suite(seed: u64, cases: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (name, family, tol) in [
        ("conv_spatial vs conv3d_ref (f64)", ConvFamily::Spatial, 1e-6),
        ("conv_temporal vs conv3d_ref (f64)", ConvFamily::Temporal, 1e-6),
        ("conv_pointwise vs conv3d_ref (f64)", ConvFamily::Pointwise, 1e-6),
        ("conv3d vs conv3d_ref (f32)", ConvFamily::Full, 1e-5),
    ] {
        let max_err = if family == ConvFamily::Full {
            oracle_gap::<f32>(family, seed, cases)?
        } else {
            oracle_gap::<f64>(family, seed, cases)?
        };
        out.push(SuiteResult {
            name: name.into(),
            passed: max_err < tol,
            cases,
            max_err,
            tolerance: tol,
        });
    }
    Ok(out)
}

/// Moves every BN away from its default so inference-mode BN is not the
/// identity.
pub fn perturb_bn<T: crate::Real>(net: &mut NetworkGraph<T>, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for v in net.param_views_mut("") {
        let (lo, hi) = match v.kind {
            ParamKind::BnScale => (0.5, 1.5),
            ParamKind::BnShift => (-0.2, 0.2),
            ParamKind::BnMean => (-0.1, 0.1),
            ParamKind::BnVar => (0.5, 1.5),
            _ => continue,
        };
        v.data.iter_mut().for_each(|x| *x = T::from_f64(rng.uniform(lo, hi)));
    }
}

/// Largest pool5 difference between a 2D network on one frame and its
/// identity-inflated counterpart on a clip repeating that frame.
pub fn inflation_gap(arch2d: ArchSpec, policy: BlockPolicy, frames: usize, seed: u64) -> Result<f64> {
    let mut twod: NetworkGraph<f32> = build_network(arch2d.with_policy(BlockPolicy::Basic2D), InitRule::seeded(seed))?;
    perturb_bn(&mut twod, seed ^ 0x5eed);
    let mut p3d: NetworkGraph<f32> = build_network(arch2d.with_policy(policy), InitRule::seeded(seed + 1))?;
    p3d.inflate_from_2d(&twod.to_named(), TemporalInit::Identity)?;

    let [_, h, w] = arch2d.input_geometry;
    let frame = ClipTensor::uniform([1, 3, 1, h, w], 0.0, 1.0, seed + 2)?;
    let clip = ClipTensor::from_fn([1, 3, frames, h, w], |[_, c, _, y, x]| frame.get(0, c, 0, y, x))?;
    let want = twod.forward(&frame)?.pool5;
    let got = p3d.forward(&clip)?.pool5;
    got.max_abs_diff(&want)
}

pub fn inflation_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let arch = ArchSpec::new(50, BlockPolicy::Basic2D, 10)?
        .with_widths(Widths::REDUCED)
        .with_geometry([8, 32, 32]);
    [BlockPolicy::AllA, BlockPolicy::AllB, BlockPolicy::AllC, BlockPolicy::MixedAbc]
        .into_iter()
        .map(|p| {
            let err = inflation_gap(arch, p, 8, seed)?;
            Ok(SuiteResult {
                name: format!("inflation {p}"),
                passed: err < 1e-4,
                cases: 1,
                max_err: err,
                tolerance: 1e-4,
            })
        })
        .collect()
}

pub fn run_selftest(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut all = oracle_suite(seed, 50)?;
    all.extend(inflation_suite(seed)?);
    Ok(all)
}
