use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Append-only key/value rows for one attention site.
#[derive(Clone, Debug)]
struct Slot<T> {
    width: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

/// Per-site key/value history for incremental decoding. A site is one
/// self-attention sub-layer evaluation (a layer may own several when its
/// sub-layer is integrated with more than one stage).
#[derive(Clone, Debug)]
pub struct KVCache<T = f32> {
    slots: Vec<Slot<T>>,
}

impl<T: Float> KVCache<T> {
    /// `widths[s]` is the key/value width stored at site s.
    pub fn new(widths: &[usize]) -> Self {
        KVCache {
            slots: widths
                .iter()
                .map(|&width| Slot {
                    width,
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn sites(&self) -> usize {
        self.slots.len()
    }

    fn slot(&self, s: usize) -> Result<&Slot<T>> {
        self.slots
            .get(s)
            .ok_or_else(|| Error::Config(format!("cache site {s} out of range ({} sites)", self.slots.len())))
    }

    pub fn len(&self, s: usize) -> Result<usize> {
        let sl = self.slot(s)?;
        Ok(sl.keys.len() / sl.width.max(1))
    }

    /// Common length of all sites, or a state error when they disagree.
    pub fn uniform_len(&self) -> Result<usize> {
        let mut it = (0..self.slots.len()).map(|s| self.len(s));
        let first = match it.next() {
            Some(l) => l?,
            None => return Ok(0),
        };
        for l in it {
            if l? != first {
                return Err(Error::State("cache sites have different lengths".into()));
            }
        }
        Ok(first)
    }

    /// Appends one or more rows (row-major) to site `s`.
    pub fn append(&mut self, s: usize, k: &[T], v: &[T]) -> Result<()> {
        let n = self.slots.len();
        let sl = self
            .slots
            .get_mut(s)
            .ok_or_else(|| Error::Config(format!("cache site {s} out of range ({n} sites)")))?;
        if k.len() != v.len() || sl.width == 0 || !k.len().is_multiple_of(sl.width) {
            return Err(Error::Shape {
                op: "cache append",
                detail: format!("rows of {}/{} vs width {}", k.len(), v.len(), sl.width),
            });
        }
        sl.keys.extend_from_slice(k);
        sl.values.extend_from_slice(v);
        Ok(())
    }

    pub fn keys(&self, s: usize) -> Result<Tensor<T>> {
        let sl = self.slot(s)?;
        Tensor::matrix(sl.keys.len() / sl.width, sl.width, sl.keys.clone())
    }

    pub fn values(&self, s: usize) -> Result<Tensor<T>> {
        let sl = self.slot(s)?;
        Tensor::matrix(sl.values.len() / sl.width, sl.width, sl.values.clone())
    }

    /// Keeps only the last `n` rows at every site.
    pub fn retain_last(&mut self, n: usize) {
        for sl in &mut self.slots {
            let keep = n * sl.width;
            if sl.keys.len() > keep {
                let cut = sl.keys.len() - keep;
                sl.keys.drain(..cut);
                sl.values.drain(..cut);
            }
        }
    }

    pub fn clear(&mut self) {
        self.retain_last(0);
    }

    /// Number of stored floats across all sites.
    pub fn floats(&self) -> usize {
        self.slots.iter().map(|s| s.keys.len() + s.values.len()).sum()
    }
}
