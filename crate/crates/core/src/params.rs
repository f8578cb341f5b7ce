//! Central parameter storage. Layers hold [`ParamId`] handles into a
//! [`ParamStore`]; the optimizer, checkpoint writer, and parameter census all
//! walk the store without knowing the network structure.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What a parameter tensor is, which decides training treatment:
/// running statistics are not trained, and weight decay only applies to
/// shift proxies, adder weights, and linear weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ShiftProxy,
    AdderWeight,
    LinearWeight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn decayed(self) -> bool {
        matches!(
            self,
            ParamKind::ShiftProxy | ParamKind::AdderWeight | ParamKind::LinearWeight
        )
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::ShiftProxy => "shift_proxy",
            ParamKind::AdderWeight => "adder_weight",
            ParamKind::LinearWeight => "linear_weight",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "bn_scale",
            ParamKind::BnShift => "bn_shift",
            ParamKind::BnRunningMean => "bn_running_mean",
            ParamKind::BnRunningVar => "bn_running_var",
        }
    }
}

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat, ordered collection of parameter tensors. Order is the creation order
/// of the network builder, which makes checkpoints and optimizer state
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            shape,
            data,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.entries[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f32]) {
        let grad = &mut self.entries[id.0].grad;
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total elements in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.len())
            .sum()
    }
}

/// Kaiming-uniform init over fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_roundtrip_and_grads() {
        let mut store = ParamStore::new();
        let id = store.add(
            "layer.w",
            ParamKind::AdderWeight,
            vec![2, 2],
            vec![1.0, 2.0, 3.0, 4.0],
        );
        assert_eq!(store.data(id), &[1.0, 2.0, 3.0, 4.0]);
        store.accumulate_grad(id, &[0.5; 4]);
        store.accumulate_grad(id, &[0.5; 4]);
        assert_eq!(store.grad(id), &[1.0; 4]);
        store.zero_grads();
        assert_eq!(store.grad(id), &[0.0; 4]);
        assert_eq!(store.find("layer.w"), Some(id));
        assert_eq!(store.find("missing"), None);
    }

    #[test]
    fn kind_treatment() {
        assert!(ParamKind::ShiftProxy.decayed());
        assert!(ParamKind::AdderWeight.decayed());
        assert!(!ParamKind::Bias.decayed());
        assert!(!ParamKind::BnScale.decayed());
        assert!(!ParamKind::BnRunningMean.trainable());
    }

    #[test]
    fn kaiming_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals = kaiming_uniform(&mut rng, 6, 1000);
        let bound = (6.0f32 / 6.0).sqrt();
        assert!(vals.iter().all(|v| v.abs() <= bound));
        // spread should cover a reasonable part of the interval
        let max = vals.iter().cloned().fold(0.0f32, |a, b| a.max(b.abs()));
        assert!(max > 0.8 * bound);
    }
}
