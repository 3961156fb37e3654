//! Long-lived parameter storage.
//!
//! Parameters survive across tapes: each forward pass clones values into
//! tape leaves, and after backward the leaf gradients are added back here
//! via [`Tape::accumulate_param_grads`](super::Tape::accumulate_param_grads).
//!
//! Initialization draws a fresh RNG per parameter, seeded from the
//! parameter name and a global seed, so init values do not depend on the
//! order parameters are registered in. That lets models that share a
//! sub-network (by parameter name) start from identical weights.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Array, Result, TensorError};
use crate::fmath;
use crate::hash::Fnv1a64;
use crate::rng::SeedRng;

/// Optimizer group a parameter belongs to; each group can carry its own
/// learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Vec<f32>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// How a new parameter's values are drawn.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform ±√(6/(fan_in+fan_out)) with fan taken from a [rows, cols]
    /// weight. For other ranks fan_in is the last dim and fan_out the
    /// product of the rest.
    Glorot,
    /// Uniform ±1/√(last dim); used for embedding tables.
    Embedding,
    Constant(f32),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Register a parameter initialized per `init`. Names must be unique.
    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
    ) -> Result<ParamId> {
        if self.lookup(name).is_some() {
            return Err(TensorError::DuplicateParam(name.into()));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Constant(c) => vec![c; numel],
            Init::Glorot => {
                let (fan_in, fan_out) = fans(shape);
                let bound = fmath::sqrt(6.0 / (fan_in + fan_out) as f32);
                self.draw_uniform(name, numel, bound)
            }
            Init::Embedding => {
                let d = *shape.last().unwrap_or(&1);
                let bound = 1.0 / fmath::sqrt(d as f32);
                self.draw_uniform(name, numel, bound)
            }
        };
        let value = Array::new(shape.to_vec(), data)?;
        self.params.push(Param {
            name: name.into(),
            grad: vec![0.0; value.numel()],
            value,
            trainable: true,
            group,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Insert a parameter with explicit contents (no initialization);
    /// used when deserializing. Names must be unique.
    pub fn insert_raw(
        &mut self,
        name: &str,
        value: Array,
        trainable: bool,
        group: ParamGroup,
    ) -> Result<ParamId> {
        if self.lookup(name).is_some() {
            return Err(TensorError::DuplicateParam(name.into()));
        }
        self.params.push(Param {
            name: name.into(),
            grad: vec![0.0; value.numel()],
            value,
            trainable,
            group,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    fn draw_uniform(&self, name: &str, numel: usize, bound: f32) -> Vec<f32> {
        let mut h = Fnv1a64::new();
        h.update(name.as_bytes());
        h.update(&self.seed.to_le_bytes());
        let mut rng = SeedRng::new(h.finish());
        (0..numel).map(|_| rng.range_f32(-bound, bound)).collect()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = false;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copy values from `src` for every parameter name both stores share.
    /// Shapes of shared names must match. Returns how many were copied.
    pub fn copy_matching_from(&mut self, src: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src_id) = src.lookup(&p.name) {
                let s = src.get(src_id);
                if s.value.shape() != p.value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "copy_matching_from",
                        lhs: p.value.shape().to_vec(),
                        rhs: s.value.shape().to_vec(),
                    });
                }
                p.value = s.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => {
            let fan_in = *shape.last().unwrap();
            (fan_in, shape[..shape.len() - 1].iter().product())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new(1);
        ps.register("w", &[2, 2], Init::Glorot, ParamGroup::Encoder)
            .unwrap();
        let err = ps
            .register("w", &[2, 2], Init::Glorot, ParamGroup::Encoder)
            .unwrap_err();
        assert!(matches!(err, TensorError::DuplicateParam(_)));
    }

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(7);
        a.register("x", &[3, 3], Init::Glorot, ParamGroup::Encoder)
            .unwrap();
        a.register("y", &[3, 3], Init::Glorot, ParamGroup::Encoder)
            .unwrap();

        let mut b = ParamStore::new(7);
        b.register("y", &[3, 3], Init::Glorot, ParamGroup::Encoder)
            .unwrap();
        b.register("x", &[3, 3], Init::Glorot, ParamGroup::Encoder)
            .unwrap();

        for name in ["x", "y"] {
            let pa = a.get(a.lookup(name).unwrap());
            let pb = b.get(b.lookup(name).unwrap());
            assert_eq!(pa.value.data(), pb.value.data(), "{name}");
        }
    }

    #[test]
    fn glorot_respects_bound() {
        let mut ps = ParamStore::new(3);
        let id = ps
            .register("w", &[16, 48], Init::Glorot, ParamGroup::Decoder)
            .unwrap();
        let bound = (6.0f32 / 64.0).sqrt();
        let p = ps.get(id);
        assert!(p.value.data().iter().all(|v| v.abs() <= bound));
        // Values should actually spread over the interval.
        let spread = p.value.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(spread > bound * 0.5);
    }

    #[test]
    fn freeze_prefix_only_hits_prefix() {
        let mut ps = ParamStore::new(1);
        ps.register("gbert.w", &[2], Init::Constant(0.0), ParamGroup::Encoder)
            .unwrap();
        ps.register("dec.w", &[2], Init::Constant(0.0), ParamGroup::Decoder)
            .unwrap();
        ps.freeze_prefix("gbert.");
        assert!(!ps.get(ps.lookup("gbert.w").unwrap()).trainable);
        assert!(ps.get(ps.lookup("dec.w").unwrap()).trainable);
    }

    #[test]
    fn copy_matching_overwrites_shared_names() {
        let mut src = ParamStore::new(1);
        src.register("shared", &[2], Init::Constant(5.0), ParamGroup::Encoder)
            .unwrap();
        src.register("only_src", &[2], Init::Constant(9.0), ParamGroup::Encoder)
            .unwrap();
        let mut dst = ParamStore::new(2);
        dst.register("shared", &[2], Init::Constant(0.0), ParamGroup::Encoder)
            .unwrap();
        dst.register("only_dst", &[2], Init::Constant(1.0), ParamGroup::Encoder)
            .unwrap();
        let n = dst.copy_matching_from(&src).unwrap();
        assert_eq!(n, 1);
        assert_eq!(dst.get(dst.lookup("shared").unwrap()).value.data(), &[5.0, 5.0]);
        assert_eq!(dst.get(dst.lookup("only_dst").unwrap()).value.data(), &[1.0, 1.0]);
    }
}
