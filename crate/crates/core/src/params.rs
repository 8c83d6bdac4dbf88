//! Named parameter enumeration shared by the optimizer, checkpoints and
//! parameter accounting.

/// What a named tensor holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
    FcWeight,
    FcBias,
}

impl ParamKind {
    /// Receives gradients.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    pub fn is_bn(self) -> bool {
        matches!(
            self,
            ParamKind::BnScale | ParamKind::BnShift | ParamKind::BnMean | ParamKind::BnVar
        )
    }
}

#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct ParamViewMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub data: &'a mut [T],
}

/// Anything that owns named tensors.
pub trait Params<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(ParamView<'a, T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(ParamViewMut<'a, T>));

    fn param_views(&self, prefix: &str) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |v| out.push(v));
        out
    }

    fn param_views_mut(&mut self, prefix: &str) -> Vec<ParamViewMut<'_, T>> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut |v| out.push(v));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
