//! Named parameter storage and the dense building blocks shared by the
//! encoder and decoder.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::autodiff::{BatchStats, Grads, Graph, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    /// Buffers such as batch-norm running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Flat, ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Hash of every name and value bit pattern; used to prove read-only paths stay read-only.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.entries {
            e.name.hash(&mut h);
            e.value.shape().hash(&mut h);
            for v in e.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
}

/// One forward (and optionally backward) evaluation over a parameter store.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let v = if entry.trainable {
            self.graph.leaf(entry.value.clone())
        } else {
            self.graph.constant(entry.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.graph.value(v)
    }

    /// Gradients of the bound trainable parameters.
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<(ParamId, Matrix)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.store.entries[i]
                    .trainable
                    .then(|| grads.take(v).map(|g| (ParamId(i), g)))?
            })
            .collect()
    }

    /// Running-statistic updates recorded by training-mode batch norms.
    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, ParamId, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(fan_in, fan_out, fan_in, rng),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            fan_in_uniform(1, fan_out, fan_in, rng),
            true,
        );
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let h = s.graph.matmul(x, w);
        s.graph.add_bias(h, b)
    }
}

/// `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp2 {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.first.forward(s, x);
        let h = s.graph.relu(h);
        self.second.forward(s, h)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0), true),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, width), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Matrix::zeros(1, width),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Matrix::filled(1, width, 1.0),
                false,
            ),
        }
    }

    /// Batch statistics in training mode, running statistics otherwise.
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.train {
            let (y, stats) = s.graph.batch_norm(x, gamma, beta, None);
            s.bn_updates.push((
                self.running_mean,
                self.running_var,
                stats.expect("training-mode stats"),
            ));
            y
        } else {
            let mean = s.store.get(self.running_mean).data().to_vec();
            let var = s.store.get(self.running_var).data().to_vec();
            s.graph.batch_norm(x, gamma, beta, Some((&mean, &var))).0
        }
    }
}

/// Folds recorded batch statistics into the running estimates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(ParamId, ParamId, BatchStats)]) {
    for (mean_id, var_id, stats) in updates {
        for (r, m) in store
            .get_mut(*mean_id)
            .data_mut()
            .iter_mut()
            .zip(&stats.mean)
        {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.get_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "fc", 16, 8, &mut rng);
        assert!(store.get(l.weight).max_abs() <= 0.25);
        assert_eq!(store.get(l.weight).shape(), (16, 8));
        assert_eq!(store.trainable_count(), 16 * 8 + 8);
    }

    #[test]
    fn running_stats_move_by_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]);
        let mut s = Session::new(&store, true);
        let xv = s.graph.constant(x);
        bn.forward(&mut s, xv);
        let updates = s.take_bn_updates();
        apply_bn_updates(&mut store, &updates);
        assert!((store.get(bn.running_mean).get(0, 0) - 0.2).abs() < 1e-12);
        // unbiased variance of {1,3} is 2
        assert!((store.get(bn.running_var).get(0, 0) - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut store = ParamStore::new();
        let id = store.add("a", Matrix::zeros(1, 2), true);
        let before = store.fingerprint();
        store.get_mut(id).set(0, 1, 1e-300);
        assert_ne!(before, store.fingerprint());
    }
}
