//! Flat parameter storage shared by the model, the optimizer and checkpoints.

use std::ops::Range;

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Every trainable tensor of a model, packed back to back in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f32>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let offset = self.data.len();
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.data.resize(offset + entry.len(), 0.0);
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        self.entries[id.0].range()
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.data[self.range(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A zeroed buffer with the same layout, used for gradients and moments.
    pub fn zeros_like(&self) -> Vec<f32> {
        vec![0.0; self.data.len()]
    }

    pub fn fill_uniform<R: Rng>(&mut self, id: ParamId, bound: f32, rng: &mut R) {
        for v in self.get_mut(id) {
            *v = rng.gen_range(-bound..=bound);
        }
    }

    pub fn fill(&mut self, id: ParamId, value: f32) {
        self.get_mut(id).fill(value);
    }
}

/// Mutable view of the gradient slice belonging to one parameter.
pub fn grad_slice<'a>(store: &ParamStore, grads: &'a mut [f32], id: ParamId) -> &'a mut [f32] {
    &mut grads[store.range(id)]
}
