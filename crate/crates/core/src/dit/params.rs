use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DitConfig, Mode};
use crate::numkernel::Tensor;

/// Weights of one Next-DiT block, generic over the leaf type so the same
/// structure holds tensors, graph handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub attn_pre_norm: P,
    pub attn_post_norm: P,
    pub mlp_pre_norm: P,
    pub mlp_post_norm: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub q_norm: P,
    pub k_norm: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    /// AdaLN modulation `[dim, 4·dim + 2]`: shift and scale for attention and
    /// MLP, then one gate channel per branch.
    pub ada_w: Option<P>,
    pub ada_b: Option<P>,
    /// Recognition mode: one scalar gate per branch, `[2]`.
    pub gate: Option<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub time_w1: Option<P>,
    pub time_b1: Option<P>,
    pub time_w2: Option<P>,
    pub time_b2: Option<P>,
    pub label_embed: Option<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub final_norm: Option<P>,
    pub final_ada_w: Option<P>,
    pub final_ada_b: Option<P>,
    pub final_w: Option<P>,
    pub final_b: Option<P>,
    pub head_w1: Option<P>,
    pub head_b1: Option<P>,
    pub head_w2: Option<P>,
    pub head_b2: Option<P>,
}

macro_rules! map_fields {
    ($src:expr, $f:expr, $prefix:expr, [$($req:ident),*], [$($opt:ident),*]) => {{
        let f = $f;
        let p = $prefix;
        ( $( f(&format!("{p}{}", stringify!($req)), &$src.$req), )* $( $src.$opt.as_ref().map(|v| f(&format!("{p}{}", stringify!($opt)), v)), )* )
    }};
}

impl<P> BlockParams<P> {
    pub fn map<'a, Q>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a P) -> Q,
    ) -> BlockParams<Q> {
        let (
            attn_pre_norm,
            attn_post_norm,
            mlp_pre_norm,
            mlp_post_norm,
            wq,
            wk,
            wv,
            wo,
            q_norm,
            k_norm,
            w1,
            b1,
            w2,
            b2,
            ada_w,
            ada_b,
            gate,
        ) = map_fields!(
            self,
            &mut *f,
            prefix,
            [attn_pre_norm, attn_post_norm, mlp_pre_norm, mlp_post_norm, wq, wk, wv, wo, q_norm, k_norm, w1, b1, w2, b2],
            [ada_w, ada_b, gate]
        );
        BlockParams {
            attn_pre_norm,
            attn_post_norm,
            mlp_pre_norm,
            mlp_post_norm,
            wq,
            wk,
            wv,
            wo,
            q_norm,
            k_norm,
            w1,
            b1,
            w2,
            b2,
            ada_w,
            ada_b,
            gate,
        }
    }
}

impl<P> ModelParams<P> {
    /// Maps every present leaf, passing its dotted name.
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> ModelParams<Q> {
        let (patch_w, patch_b, time_w1, time_b1, time_w2, time_b2, label_embed, final_norm, final_ada_w, final_ada_b, final_w, final_b, head_w1, head_b1, head_w2, head_b2) = map_fields!(
            self,
            &mut f,
            "",
            [patch_w, patch_b],
            [time_w1, time_b1, time_w2, time_b2, label_embed, final_norm, final_ada_w, final_ada_b, final_w, final_b, head_w1, head_b1, head_w2, head_b2]
        );
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.map(&format!("blocks.{i}."), &mut f))
            .collect();
        ModelParams {
            patch_w,
            patch_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            label_embed,
            blocks,
            final_norm,
            final_ada_w,
            final_ada_b,
            final_w,
            final_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        }
    }

    /// Leaves in a fixed order, with names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(|name, p| out.push((name.to_string(), p)));
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    /// Rebuilds the structure from leaves in [`named`](Self::named) order.
    pub fn from_leaves<Q>(&self, leaves: Vec<Q>) -> ModelParams<Q> {
        let mut it = leaves.into_iter();
        self.map(|_, _| it.next().expect("leaf count matches structure"))
    }
}

fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

impl ModelParams<Tensor> {
    /// Truncated-normal projections, unit norm gains, zero biases; AdaLN
    /// modulation, scalar gates and the generative output layer start at zero.
    pub fn init<R: Rng>(cfg: &DitConfig, rng: &mut R) -> Self {
        let (d, dh, std) = (cfg.dim, cfg.d_head(), cfg.init_std);
        let ones = |n: usize| Tensor::full(&[n], 1.0);
        let zeros = |shape: &[usize]| Tensor::zeros(shape);
        let generative = cfg.mode == Mode::Generative;
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                attn_pre_norm: ones(d),
                attn_post_norm: ones(d),
                mlp_pre_norm: ones(d),
                mlp_post_norm: ones(d),
                wq: trunc_normal(rng, &[d, cfg.q_heads * dh], std),
                wk: trunc_normal(rng, &[d, cfg.kv_heads * dh], std),
                wv: trunc_normal(rng, &[d, cfg.kv_heads * dh], std),
                wo: trunc_normal(rng, &[cfg.q_heads * dh, d], std),
                q_norm: ones(dh),
                k_norm: ones(dh),
                w1: trunc_normal(rng, &[d, cfg.hidden()], std),
                b1: zeros(&[cfg.hidden()]),
                w2: trunc_normal(rng, &[cfg.hidden(), d], std),
                b2: zeros(&[d]),
                ada_w: generative.then(|| zeros(&[d, cfg.ada_width()])),
                ada_b: generative.then(|| zeros(&[cfg.ada_width()])),
                gate: (!generative).then(|| zeros(&[2])),
            })
            .collect();
        let pd = cfg.patch_dim();
        let gen = |t: Tensor| generative.then_some(t);
        let rec = |t: Tensor| (!generative).then_some(t);
        ModelParams {
            patch_w: trunc_normal(rng, &[pd, d], std),
            patch_b: zeros(&[d]),
            time_w1: gen(trunc_normal(rng, &[cfg.time_features, d], std)),
            time_b1: gen(zeros(&[d])),
            time_w2: gen(trunc_normal(rng, &[d, d], std)),
            time_b2: gen(zeros(&[d])),
            label_embed: (generative && cfg.num_classes > 0)
                .then(|| trunc_normal(rng, &[cfg.num_classes + 1, d], std)),
            blocks,
            final_norm: gen(ones(d)),
            final_ada_w: gen(zeros(&[d, 2 * d])),
            final_ada_b: gen(zeros(&[2 * d])),
            final_w: gen(zeros(&[d, pd])),
            final_b: gen(zeros(&[pd])),
            head_w1: rec(trunc_normal(rng, &[d, d], std)),
            head_b1: rec(zeros(&[d])),
            head_w2: rec(trunc_normal(rng, &[d, cfg.num_classes], std)),
            head_b2: rec(zeros(&[cfg.num_classes])),
        }
    }

    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    /// Fills every leaf (including zero-initialized ones) with fresh noise of
    /// the given std, keeping norm gains near one.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let named: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let fresh: Vec<Tensor> = self
            .leaves()
            .iter()
            .zip(&named)
            .map(|(t, name)| {
                let noise = trunc_normal(rng, t.shape(), std);
                if name.ends_with("norm") {
                    noise.map(|v| 1.0 + v)
                } else {
                    noise
                }
            })
            .collect();
        *self = self.from_leaves(fresh);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_ordered() {
        let cfg = DitConfig {
            num_classes: 3,
            ..DitConfig::default()
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "patch_w");
        assert!(names.contains(&"blocks.1.ada_w".to_string()));
        assert!(!names.iter().any(|n| n.contains("head")));
        let again = p.from_leaves(p.leaves().into_iter().cloned().collect());
        assert_eq!(again, p);
    }

    #[test]
    fn zero_initialized_modulation_and_output() {
        let cfg = DitConfig::default();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for b in &p.blocks {
            assert!(b.ada_w.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
            assert!(b.ada_b.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
            assert!(b.wq.data().iter().all(|v| v.abs() <= 0.04));
        }
        assert!(p.final_w.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gqa_kv_projection_is_a_quarter_of_mha() {
        let gqa = DitConfig {
            dim: 64 * 32,
            q_heads: 32,
            kv_heads: 8,
            ..DitConfig::default()
        };
        let mha = DitConfig {
            kv_heads: 32,
            ..gqa.clone()
        };
        gqa.validate().unwrap();
        assert_eq!(4 * gqa.kv_param_count(), mha.kv_param_count());
        let bad = DitConfig {
            kv_heads: 3,
            ..DitConfig::default()
        };
        assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
    }
}
