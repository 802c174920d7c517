//! Soft attention over the feature grid.
//!
//! Each cell is scored by a one-hidden-layer network
//! `score(x_i, h) = w_aᵀ·tanh(W_xᵀ·x_i + W_hᵀ·h + b)`; the scores are
//! softmax-normalized into weights and the context vector is the weighted sum
//! of the cell features.

use rand::Rng;

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, matvec_t_acc, softmax_in_place, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// D×A
    pub w_x: Tensor,
    /// H×A
    pub w_h: Tensor,
    /// A
    pub bias: Tensor,
    /// A
    pub score: Tensor,
}

impl AttentionParams {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, attn_dim: usize) -> Self {
        AttentionParams {
            w_x: Tensor::zeros(&[feature_dim, attn_dim]),
            w_h: Tensor::zeros(&[hidden_dim, attn_dim]),
            bias: Tensor::zeros(&[attn_dim]),
            score: Tensor::zeros(&[attn_dim]),
        }
    }

    pub fn init<R: Rng + ?Sized>(feature_dim: usize, hidden_dim: usize, attn_dim: usize, rng: &mut R) -> Self {
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        AttentionParams {
            w_x: Tensor::uniform(&[feature_dim, attn_dim], glorot(feature_dim, attn_dim), rng),
            w_h: Tensor::uniform(&[hidden_dim, attn_dim], glorot(hidden_dim, attn_dim), rng),
            bias: Tensor::zeros(&[attn_dim]),
            score: Tensor::uniform(&[attn_dim], glorot(attn_dim, 1), rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_x.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.rows()
    }

    pub fn attn_dim(&self) -> usize {
        self.bias.len()
    }

    fn check(&self, features: &FeatureGrid, h_prev: &[f64]) -> Result<()> {
        let a = self.attn_dim();
        if a == 0 || self.w_x.cols() != a || self.w_h.cols() != a || self.score.len() != a {
            return Err(Error::shape(format!(
                "inconsistent attention params: w_x {:?}, w_h {:?}, bias {:?}, score {:?}",
                self.w_x.shape(),
                self.w_h.shape(),
                self.bias.shape(),
                self.score.shape()
            )));
        }
        if features.dim() != self.feature_dim() {
            return Err(Error::shape(format!(
                "features have dimension {} but attention expects {}",
                features.dim(),
                self.feature_dim()
            )));
        }
        if h_prev.len() != self.hidden_dim() {
            return Err(Error::shape(format!(
                "hidden state has dimension {} but attention expects {}",
                h_prev.len(),
                self.hidden_dim()
            )));
        }
        Ok(())
    }
}

/// Result of one attention step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStep {
    /// unnormalized scores α, one per cell
    pub scores: Tensor,
    /// softmax weights β, one per cell
    pub weights: Tensor,
    /// context vector ẑ (dimension D)
    pub context: Tensor,
}

/// Per-image projection `W_xᵀ·x_i + b` of every cell. It does not depend on
/// the decoder state, so it is computed once per image and reused every step.
#[derive(Clone, Debug)]
pub struct AttentionKeys {
    cells: usize,
    dim: usize,
    data: Vec<f64>,
}

pub fn project_features(features: &FeatureGrid, params: &AttentionParams) -> AttentionKeys {
    let (k, d, a) = (features.len(), features.dim(), params.attn_dim());
    let mut data = Vec::with_capacity(k * a);
    for _ in 0..k {
        data.extend_from_slice(params.bias.data());
    }
    gemm_acc(k, d, a, features.vectors.data(), params.w_x.data(), &mut data);
    AttentionKeys { cells: k, dim: a, data }
}

/// Intermediates for [`attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    hidden: Vec<f64>,
    weights: Vec<f64>,
    h_prev: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub params: AttentionParams,
    /// K×D
    pub features: Tensor,
    pub h_prev: Tensor,
}

pub fn attend(features: &FeatureGrid, h_prev: &Tensor, params: &AttentionParams) -> Result<AttentionStep> {
    attend_with_cache(features, h_prev, params).map(|(s, _)| s)
}

pub fn attend_with_cache(
    features: &FeatureGrid,
    h_prev: &Tensor,
    params: &AttentionParams,
) -> Result<(AttentionStep, AttentionCache)> {
    params.check(features, h_prev.data())?;
    let keys = project_features(features, params);
    Ok(attend_keys(&keys, features, h_prev.data(), params))
}

pub(crate) fn attend_keys(
    keys: &AttentionKeys,
    features: &FeatureGrid,
    h_prev: &[f64],
    params: &AttentionParams,
) -> (AttentionStep, AttentionCache) {
    let (k, a, d) = (keys.cells, keys.dim, features.dim());
    let mut query = vec![0.0; a];
    matvec_t_acc(params.w_h.data(), h_prev.len(), a, h_prev, &mut query);

    let mut hidden = vec![0.0; k * a];
    let mut scores = vec![0.0; k];
    for i in 0..k {
        let key = &keys.data[i * a..(i + 1) * a];
        let hid = &mut hidden[i * a..(i + 1) * a];
        for ((hv, kv), qv) in hid.iter_mut().zip(key).zip(&query) {
            *hv = (kv + qv).tanh();
        }
        scores[i] = dot(hid, params.score.data());
    }
    let mut weights = scores.clone();
    softmax_in_place(&mut weights);

    let mut context = vec![0.0; d];
    for (i, &b) in weights.iter().enumerate() {
        for (cv, x) in context.iter_mut().zip(features.cell(i)) {
            *cv += b * x;
        }
    }
    let step = AttentionStep {
        scores: Tensor::vector(scores),
        weights: Tensor::vector(weights.clone()),
        context: Tensor::vector(context),
    };
    let cache = AttentionCache {
        hidden,
        weights,
        h_prev: h_prev.to_vec(),
    };
    (step, cache)
}

/// Backward of [`attend_keys`]: accumulates into `grads.w_h`, `grads.score`,
/// the key gradient (K×A), the direct feature gradient, and `d_h`.
pub(crate) fn attend_keys_backward(
    params: &AttentionParams,
    features: &FeatureGrid,
    cache: &AttentionCache,
    grad_z: &[f64],
    grads: &mut AttentionParams,
    d_keys: &mut [f64],
    d_features: &mut [f64],
    d_h: &mut [f64],
) {
    let (k, d, a) = (features.len(), features.dim(), params.attn_dim());
    let mut d_beta = vec![0.0; k];
    for i in 0..k {
        d_beta[i] = dot(grad_z, features.cell(i));
        let b = cache.weights[i];
        for (dv, gz) in d_features[i * d..(i + 1) * d].iter_mut().zip(grad_z) {
            *dv += b * gz;
        }
    }
    let mean: f64 = cache.weights.iter().zip(&d_beta).map(|(b, g)| b * g).sum();
    let mut d_query = vec![0.0; a];
    for i in 0..k {
        let ds = cache.weights[i] * (d_beta[i] - mean);
        if ds == 0.0 {
            continue;
        }
        let hid = &cache.hidden[i * a..(i + 1) * a];
        let dk = &mut d_keys[i * a..(i + 1) * a];
        for j in 0..a {
            grads.score.data_mut()[j] += ds * hid[j];
            let dpre = ds * params.score.data()[j] * (1.0 - hid[j] * hid[j]);
            dk[j] += dpre;
            d_query[j] += dpre;
        }
    }
    let hdim = cache.h_prev.len();
    crate::tensor::outer_acc(grads.w_h.data_mut(), &cache.h_prev, &d_query);
    crate::tensor::matvec_acc(params.w_h.data(), hdim, a, &d_query, d_h);
}

/// Backward of [`project_features`]: turns accumulated key gradients into
/// `W_x` / bias gradients and adds the feature gradient.
pub(crate) fn project_backward(
    params: &AttentionParams,
    features: &FeatureGrid,
    d_keys: &[f64],
    grads: &mut AttentionParams,
    d_features: &mut [f64],
) {
    let (k, d, a) = (features.len(), features.dim(), params.attn_dim());
    gemm_tn_acc(d, k, a, features.vectors.data(), d_keys, grads.w_x.data_mut());
    for i in 0..k {
        for (bv, g) in grads.bias.data_mut().iter_mut().zip(&d_keys[i * a..(i + 1) * a]) {
            *bv += g;
        }
    }
    gemm_nt_acc(k, a, d, d_keys, params.w_x.data(), d_features);
}

/// Gradients of a scalar loss w.r.t. the params, the features and `h_prev`,
/// given the loss gradient w.r.t. the context vector.
pub fn attention_backward(
    params: &AttentionParams,
    features: &FeatureGrid,
    cache: &AttentionCache,
    grad_z: &Tensor,
) -> Result<AttentionGrads> {
    params.check(features, &cache.h_prev)?;
    if grad_z.len() != features.dim() || cache.weights.len() != features.len() {
        return Err(Error::shape(format!(
            "context gradient of length {} for {} cells of dimension {} (cache has {} cells)",
            grad_z.len(),
            features.len(),
            features.dim(),
            cache.weights.len()
        )));
    }
    let (k, d, a) = (features.len(), features.dim(), params.attn_dim());
    let mut grads = AttentionParams::zeros(d, params.hidden_dim(), a);
    let mut d_keys = vec![0.0; k * a];
    let mut d_features = vec![0.0; k * d];
    let mut d_h = vec![0.0; params.hidden_dim()];
    attend_keys_backward(
        params,
        features,
        cache,
        grad_z.data(),
        &mut grads,
        &mut d_keys,
        &mut d_features,
        &mut d_h,
    );
    project_backward(params, features, &d_keys, &mut grads, &mut d_features);
    Ok(AttentionGrads {
        params: grads,
        features: Tensor::matrix(k, d, d_features)?,
        h_prev: Tensor::vector(d_h),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(k: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureGrid {
        FeatureGrid::from_vectors(Tensor::uniform(&[k, d], 1.0, rng)).unwrap()
    }

    #[test]
    fn identical_cells_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data: Vec<f64> = (0..5).flat_map(|_| cell.clone()).collect();
        let g = FeatureGrid::from_vectors(Tensor::matrix(5, 6, data).unwrap()).unwrap();
        let p = AttentionParams::init(6, 4, 3, &mut rng);
        let h = Tensor::uniform(&[4], 1.0, &mut rng);
        let s = attend(&g, &h, &p).unwrap();
        for b in s.weights.data() {
            assert!((b - 0.2).abs() < 1e-15);
        }
        for (z, x) in s.context.data().iter().zip(&cell) {
            assert!((z - x).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_scores_zero_and_ln3() {
        // D=1, A=1, identity-ish hidden unit: score_i = w·tanh(x_i)
        let x = [0.0, 0.5];
        let w = 3f64.ln() / 0.5f64.tanh();
        let p = AttentionParams {
            w_x: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            w_h: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
            score: Tensor::vector(vec![w]),
        };
        let g = FeatureGrid::from_vectors(Tensor::matrix(2, 1, x.to_vec()).unwrap()).unwrap();
        let s = attend(&g, &Tensor::vector(vec![0.3]), &p).unwrap();
        assert!((s.scores.data()[1] - 3f64.ln()).abs() < 1e-12);
        assert!((s.weights.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.weights.data()[1] - 0.75).abs() < 1e-12);
        assert!((s.context.data()[0] - (0.25 * 0.0 + 0.75 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_params_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(7, 5, &mut rng);
        let s = attend(&g, &Tensor::uniform(&[4], 1.0, &mut rng), &AttentionParams::zeros(5, 4, 6)).unwrap();
        assert!(s.scores.data().iter().all(|v| *v == 0.0));
        assert!(s.weights.data().iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(3, 5, &mut rng);
        let p = AttentionParams::zeros(5, 4, 2);
        assert!(matches!(attend(&g, &Tensor::zeros(&[3]), &p), Err(Error::Shape(_))));
        let p = AttentionParams::zeros(6, 4, 2);
        assert!(matches!(attend(&g, &Tensor::zeros(&[4]), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn permuting_cells_permutes_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = grid(6, 4, &mut rng);
        let p = AttentionParams::init(4, 3, 5, &mut rng);
        let h = Tensor::uniform(&[3], 1.0, &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let data: Vec<f64> = perm.iter().flat_map(|&i| g.cell(i).to_vec()).collect();
        let pg = FeatureGrid::from_vectors(Tensor::matrix(6, 4, data).unwrap()).unwrap();
        let a = attend(&g, &h, &p).unwrap();
        let b = attend(&pg, &h, &p).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((a.weights.data()[i] - b.weights.data()[j]).abs() < 1e-12);
        }
        for (x, y) in a.context.data().iter().zip(b.context.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_context_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid(4, 3, &mut rng);
        let p = AttentionParams::init(3, 2, 5, &mut rng);
        let (_, cache) = attend_with_cache(&g, &Tensor::uniform(&[2], 1.0, &mut rng), &p).unwrap();
        let gr = attention_backward(&p, &g, &cache, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(gr.params.w_x.max_abs() + gr.params.w_h.max_abs(), 0.0);
        assert_eq!(gr.params.bias.max_abs() + gr.params.score.max_abs(), 0.0);
        assert_eq!(gr.features.max_abs() + gr.h_prev.max_abs(), 0.0);
        assert!(attention_backward(&p, &g, &cache, &Tensor::zeros(&[4])).is_err());
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let scale = a.max_abs().max(b.max_abs());
        let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if scale == 0.0 { 0.0 } else { diff / scale }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (k, d, hd, a) = (6, 8, 10, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let g = grid(k, d, &mut rng);
        let p = AttentionParams::init(d, hd, a, &mut rng);
        let h = Tensor::uniform(&[hd], 1.0, &mut rng);
        let upstream = Tensor::uniform(&[d], 1.0, &mut rng);
        let loss = |g: &FeatureGrid, h: &Tensor, p: &AttentionParams| {
            dot(attend(g, h, p).unwrap().context.data(), upstream.data())
        };
        let (_, cache) = attend_with_cache(&g, &h, &p).unwrap();
        let gr = attention_backward(&p, &g, &cache, &upstream).unwrap();

        let eps = 1e-5;
        let fd = finite_diff_grad(|t| { let mut q = p.clone(); q.w_x = t.clone(); loss(&g, &h, &q) }, &p.w_x, eps).unwrap();
        assert!(max_rel_err(&fd, &gr.params.w_x) < 1e-4);
        let fd = finite_diff_grad(|t| { let mut q = p.clone(); q.w_h = t.clone(); loss(&g, &h, &q) }, &p.w_h, eps).unwrap();
        assert!(max_rel_err(&fd, &gr.params.w_h) < 1e-4);
        let fd = finite_diff_grad(|t| { let mut q = p.clone(); q.bias = t.clone(); loss(&g, &h, &q) }, &p.bias, eps).unwrap();
        assert!(max_rel_err(&fd, &gr.params.bias) < 1e-4);
        let fd = finite_diff_grad(|t| { let mut q = p.clone(); q.score = t.clone(); loss(&g, &h, &q) }, &p.score, eps).unwrap();
        assert!(max_rel_err(&fd, &gr.params.score) < 1e-4);
        let fd = finite_diff_grad(
            |t| loss(&FeatureGrid::from_vectors(t.clone()).unwrap(), &h, &p),
            &g.vectors,
            eps,
        )
        .unwrap();
        assert!(max_rel_err(&fd, &gr.features) < 1e-4);
        let fd = finite_diff_grad(|t| loss(&g, t, &p), &h, eps).unwrap();
        assert!(max_rel_err(&fd, &gr.h_prev) < 1e-4);
        assert!(gr.h_prev.max_abs() > 1e-6);
    }
}
