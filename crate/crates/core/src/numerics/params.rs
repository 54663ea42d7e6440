use std::collections::BTreeMap;

use super::Tensor;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id_of(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradient for one parameter. Embedding tables accumulate sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    fn add_scaled(&mut self, other: &GradBuf, scale: f64) {
        match (self, other) {
            (GradBuf::Dense(a), GradBuf::Dense(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += scale * y;
                }
            }
            (GradBuf::Rows { rows: a, width }, GradBuf::Rows { rows: b, .. }) => {
                for (r, vals) in b {
                    let dst = a.entry(*r).or_insert_with(|| vec![0.0; *width]);
                    for (x, y) in dst.iter_mut().zip(vals) {
                        *x += scale * y;
                    }
                }
            }
            (a, b) => {
                // Mixed representations: fall back to dense on the left.
                let mut dense = a.to_dense_len(b.dense_len_hint().max(a.dense_len_hint()));
                let other = b.to_dense_len(dense.len());
                for (x, y) in dense.iter_mut().zip(&other) {
                    *x += scale * y;
                }
                *a = GradBuf::Dense(dense);
            }
        }
    }

    fn dense_len_hint(&self) -> usize {
        match self {
            GradBuf::Dense(v) => v.len(),
            GradBuf::Rows { width, rows } => rows.keys().next_back().map_or(0, |r| (r + 1) * width),
        }
    }

    fn to_dense_len(&self, len: usize) -> Vec<f64> {
        match self {
            GradBuf::Dense(v) => {
                let mut out = v.clone();
                out.resize(len, 0.0);
                out
            }
            GradBuf::Rows { width, rows } => {
                let mut out = vec![0.0; len];
                for (r, vals) in rows {
                    out[r * width..(r + 1) * width].copy_from_slice(vals);
                }
                out
            }
        }
    }

    fn values_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            GradBuf::Dense(v) => Box::new(v.iter_mut()),
            GradBuf::Rows { rows, .. } => Box::new(rows.values_mut().flat_map(|r| r.iter_mut())),
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            GradBuf::Dense(v) => Box::new(v.iter()),
            GradBuf::Rows { rows, .. } => Box::new(rows.values().flat_map(|r| r.iter())),
        }
    }
}

/// Per-parameter gradients; parameters never touched stay `None` (all zero).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    bufs: Vec<Option<GradBuf>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients {
            bufs: vec![None; num_params],
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn num_params(&self) -> usize {
        self.bufs.len()
    }

    pub fn add_dense(&mut self, id: ParamId, grad: &[f64]) {
        match &mut self.bufs[id.0] {
            slot @ None => *slot = Some(GradBuf::Dense(grad.to_vec())),
            Some(buf) => buf.add_scaled(&GradBuf::Dense(grad.to_vec()), 1.0),
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, grad: &[f64]) {
        let slot = self.bufs[id.0].get_or_insert_with(|| GradBuf::Rows {
            width: grad.len(),
            rows: BTreeMap::new(),
        });
        match slot {
            GradBuf::Rows { rows, width } => {
                let dst = rows.entry(row).or_insert_with(|| vec![0.0; *width]);
                for (x, y) in dst.iter_mut().zip(grad) {
                    *x += y;
                }
            }
            GradBuf::Dense(v) => {
                let w = grad.len();
                for (x, y) in v[row * w..(row + 1) * w].iter_mut().zip(grad) {
                    *x += y;
                }
            }
        }
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => d.add_scaled(src, scale),
                None => {
                    let mut s = src.clone();
                    s.values_mut().for_each(|x| *x *= scale);
                    *dst = Some(s);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.bufs.iter_mut().flatten() {
            buf.values_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .flat_map(|b| b.values())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn for_each_value_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for buf in self.bufs.iter_mut().flatten() {
            buf.values_mut().for_each(&mut f);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs[id.0].as_ref()
    }

    /// Dense copy of one parameter's gradient (zeros if untouched).
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<f64> {
        match &self.bufs[id.0] {
            None => vec![0.0; len],
            Some(b) => b.to_dense_len(len),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs
            .iter()
            .flatten()
            .flat_map(|b| b.values())
            .all(|x| x.is_finite())
    }
}
