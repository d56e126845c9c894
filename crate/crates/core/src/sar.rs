//! Structurally attentive refinement.
//!
//! The `K` semantic points with the highest prediction entropy are refined by
//! multi-head cross-attention over the `M` most confident boundary points
//! (boundary features serve as both keys and values), then written back into
//! the semantic feature map at their original positions.

use std::cmp::Ordering;
use std::rc::Rc;

use crate::autograd::{softmax_into, sigmoid, Var};
use crate::config::SarConfig;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::{conv2d_forward, ConvGeom, Real, Tensor};

/// Class probabilities `p_s (B, n, h, w)` and boundary probability `p_b (B, 1, h, w)`.
#[derive(Clone, Debug)]
pub struct PredictionMaps<T: Real> {
    pub p_s: Tensor<T>,
    pub p_b: Tensor<T>,
}

/// Per-stage prediction heads: 1×1 conv to `n` classes and 1×1 conv to one
/// boundary channel.
pub struct StageHeads {
    pub sem: Conv2d,
    pub bnd: Conv2d,
}

impl StageHeads {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize, n_classes: usize) -> Self {
        Self {
            sem: b.conv(&format!("{name}.sem"), width, n_classes, ConvGeom::same(1, 1), true),
            bnd: b.conv(&format!("{name}.bnd"), width, 1, ConvGeom::same(1, 1), true),
        }
    }

    pub fn sem_logits<'t, T: Real>(&self, ctx: &Ctx<'t, T>, f: Var<'t, T>) -> Var<'t, T> {
        self.sem.forward(ctx, f)
    }

    pub fn bnd_logits<'t, T: Real>(&self, ctx: &Ctx<'t, T>, f: Var<'t, T>) -> Var<'t, T> {
        self.bnd.forward(ctx, f)
    }

    /// Probability maps evaluated outside the tape; selection does not
    /// propagate gradients.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, f_s: &Tensor<T>, f_b: &Tensor<T>) -> PredictionMaps<T> {
        let conv = |c: &Conv2d, x: &Tensor<T>| {
            let w = store.get(&format!("{}.weight", c.name)).unwrap();
            let b = store.get(&format!("{}.bias", c.name));
            conv2d_forward(x, w, b, c.geom)
        };
        let mut p_s = conv(&self.sem, f_s);
        let (bs, n, h, w) = p_s.dims4();
        let hw = h * w;
        let mut logits = vec![T::zero(); n];
        let mut probs = vec![T::zero(); n];
        for b in 0..bs {
            for px in 0..hw {
                for c in 0..n {
                    logits[c] = p_s.data()[(b * n + c) * hw + px];
                }
                softmax_into(&logits, &mut probs);
                for c in 0..n {
                    p_s.data_mut()[(b * n + c) * hw + px] = probs[c];
                }
            }
        }
        let p_b = conv(&self.bnd, f_b).map(sigmoid);
        PredictionMaps { p_s, p_b }
    }
}

/// Shannon entropy `-Σ_c p_c ln p_c` per pixel of an `(n, h, w)` (or
/// `(1, n, h, w)`) probability tensor, with `0·ln 0 = 0`. Returns `h·w` values.
pub fn pixel_entropy<T: Real>(p_s: &Tensor<T>) -> Vec<T> {
    let shape = p_s.shape();
    let (n, hw) = match shape.len() {
        3 => (shape[0], shape[1] * shape[2]),
        4 => {
            assert_eq!(shape[0], 1, "pixel_entropy takes a single item");
            (shape[1], shape[2] * shape[3])
        }
        _ => panic!("pixel_entropy expects (n, h, w), got {shape:?}"),
    };
    let d = p_s.data();
    (0..hw)
        .map(|px| {
            (0..n).fold(T::zero(), |acc, c| {
                let p = d[c * hw + px];
                if p > T::zero() {
                    acc - p * p.ln()
                } else {
                    acc
                }
            })
        })
        .collect()
}

/// Selected flattened positions, ordered by non-increasing score.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Gathers the selected rows of batch item `b` of `map (B, C, h, w)`.
    pub fn gather<'t, T: Real>(&self, map: Var<'t, T>, b: usize) -> PointSet<'t, T> {
        let indices = Rc::new(self.indices.clone());
        PointSet {
            features: map.gather_points(b, indices.clone()),
            indices,
            scores: self.scores.clone(),
        }
    }
}

/// Gathered point features, row `i` taken from the source map at `indices[i]`.
#[derive(Clone)]
pub struct PointSet<'t, T: Real> {
    pub indices: Rc<Vec<usize>>,
    pub features: Var<'t, T>,
    pub scores: Vec<f64>,
}

/// The `k` largest scores; ties go to the smaller flattened index.
pub fn select_top_k<T: Real>(scores: &[T], k: usize) -> Result<Selection> {
    if k > scores.len() {
        return Err(Error::Selection {
            requested: k,
            available: scores.len(),
        });
    }
    let order = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .f64()
            .total_cmp(&scores[a].f64())
            .then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        idx.clear();
    } else if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    let scores = idx.iter().map(|&i| scores[i].f64()).collect();
    Ok(Selection { indices: idx, scores })
}

/// The `k` pixels of highest entropy.
pub fn select_uncertain<T: Real>(entropy: &[T], k: usize) -> Result<Selection> {
    select_top_k(entropy, k)
}

/// The `m` pixels of highest boundary probability.
pub fn select_confident_boundary<T: Real>(p_b: &[T], m: usize) -> Result<Selection> {
    select_top_k(p_b, m)
}

/// Multi-head scaled dot-product cross-attention: queries from the uncertain
/// points, keys and values from the boundary points.
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_k: usize,
}

pub struct Attended<'t, T: Real> {
    /// `(K, C)`; equals the queries when refinement was skipped.
    pub output: Var<'t, T>,
    /// Per-head `(K, M)` attention weights.
    pub weights: Vec<Var<'t, T>>,
    /// Set when there were no boundary points to attend to.
    pub skipped: bool,
}

impl CrossAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize, cfg: &SarConfig) -> Self {
        let d_k = cfg.head_dim(width);
        let inner = cfg.heads * d_k;
        Self {
            q: b.linear(&format!("{name}.q"), width, inner),
            k: b.linear(&format!("{name}.k"), width, inner),
            v: b.linear(&format!("{name}.v"), width, inner),
            o: b.linear(&format!("{name}.o"), inner, width),
            heads: cfg.heads,
            d_k,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, T>, queries: Var<'t, T>, values: Var<'t, T>) -> Attended<'t, T> {
        if values.shape()[0] == 0 || queries.shape()[0] == 0 {
            return Attended {
                output: queries,
                weights: Vec::new(),
                skipped: true,
            };
        }
        let q = self.q.forward(ctx, queries);
        let k = self.k.forward(ctx, values);
        let v = self.v.forward(ctx, values);
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                q.slice_cols(h * self.d_k, self.d_k),
                k.slice_cols(h * self.d_k, self.d_k),
                v.slice_cols(h * self.d_k, self.d_k),
            );
            let a = qh.matmul_nt(kh).scale(scale).softmax_rows();
            outs.push(a.matmul(vh));
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs) };
        Attended {
            output: self.o.forward(ctx, cat),
            weights,
            skipped: false,
        }
    }
}

/// One stage's refinement block.
pub struct Sar {
    pub attention: CrossAttention,
    pub fuse: Linear,
    pub cfg: SarConfig,
}

pub struct SarOutput<'t, T: Real> {
    pub refined: Var<'t, T>,
    /// Per batch item: (uncertain points, boundary points).
    pub selections: Vec<(Selection, Selection)>,
    pub predictions: PredictionMaps<T>,
    pub attended: Vec<Attended<'t, T>>,
}

impl Sar {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize, cfg: &SarConfig) -> Self {
        Self {
            attention: CrossAttention::new(b, &format!("{name}.attn"), width, cfg),
            fuse: b.linear(&format!("{name}.fuse"), width, width),
            cfg: cfg.clone(),
        }
    }

    /// Refines `f_s` under the guidance of `f_b`. Positions outside the
    /// selected uncertain set are passed through unchanged.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, T>,
        f_s: Var<'t, T>,
        f_b: Var<'t, T>,
        heads: &StageHeads,
    ) -> Result<SarOutput<'t, T>> {
        let (ss, sb) = (f_s.shape(), f_b.shape());
        if ss[0] != sb[0] || ss[2..] != sb[2..] {
            return Err(Error::Shape(format!("SAR inputs differ: {ss:?} vs {sb:?}")));
        }
        let (bs, hw) = (ss[0], ss[2] * ss[3]);
        let k = self.cfg.k_for(hw);
        let m = self.cfg.m_for(hw);
        let predictions = heads.predict(ctx.store(), &f_s.value(), &f_b.value());
        let mut refined = f_s;
        let mut selections = Vec::with_capacity(bs);
        let mut attended = Vec::with_capacity(bs);
        for b in 0..bs {
            let entropy = pixel_entropy(&predictions.p_s.batch_item(b));
            let uncertain = select_uncertain(&entropy, k)?;
            let confident = select_confident_boundary(predictions.p_b.plane(b, 0), m)?;
            if !uncertain.is_empty() {
                let q = uncertain.gather(f_s, b);
                let v = confident.gather(f_b, b);
                let att = self.attention.forward(ctx, q.features, v.features);
                if !att.skipped {
                    let rows = q.features.add(self.fuse.forward(ctx, att.output));
                    refined = refined.scatter_points(b, q.indices.clone(), rows);
                }
                attended.push(att);
            }
            selections.push((uncertain, confident));
        }
        Ok(SarOutput {
            refined,
            selections,
            predictions,
            attended,
        })
    }
}
