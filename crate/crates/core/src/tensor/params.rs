use super::{Float, Tensor};

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Model components hold `ParamId`s into a store,
/// so tying two components means giving them the same ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Components that own parameter handles.
pub trait HasParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId));

    fn param_ids(&mut self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.visit_params(&mut |id| out.push(*id));
        out
    }
}

impl<P: HasParams> HasParams for Vec<P> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        for p in self {
            p.visit_params(f);
        }
    }
}

impl<P: HasParams> HasParams for Option<P> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        if let Some(p) = self {
            p.visit_params(f);
        }
    }
}
