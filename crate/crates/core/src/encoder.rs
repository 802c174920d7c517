//! Convolutional encoder: grayscale word image to a grid of feature vectors.
//!
//! Every layer is a 3×3 convolution followed by ReLU and an optional max-pool.
//! The last layer's activations are read out cell by cell (row-major over the
//! spatial grid), one `D`-dimensional vector per cell. There is no
//! fully-connected head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    /// (vertical, horizontal)
    pub stride: (usize, usize),
    pub padding: usize,
    /// Non-overlapping max-pool window (vertical, horizontal) applied after ReLU.
    pub pool: Option<(usize, usize)>,
}

impl ConvSpec {
    pub fn new(out_channels: usize) -> Self {
        ConvSpec {
            out_channels,
            stride: (1, 1),
            padding: 0,
            pool: None,
        }
    }

    pub fn stride(mut self, vertical: usize, horizontal: usize) -> Self {
        self.stride = (vertical, horizontal);
        self
    }

    pub fn pool(mut self, vertical: usize, horizontal: usize) -> Self {
        self.pool = Some((vertical, horizontal));
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub layers: Vec<ConvSpec>,
}

impl Default for EncoderConfig {
    /// 32 px input, 16→32→64 channels with 2×2 pools after the first two
    /// layers. A 32×128 image yields a 4×13 grid.
    fn default() -> Self {
        EncoderConfig::with_channels(&[16, 32, 64])
    }
}

impl EncoderConfig {
    /// The default three-layer geometry with different channel counts.
    pub fn with_channels(channels: &[usize; 3]) -> Self {
        EncoderConfig {
            input_height: 32,
            layers: vec![
                ConvSpec::new(channels[0]).pool(2, 2),
                ConvSpec::new(channels[1]).stride(1, 2).pool(2, 2),
                ConvSpec::new(channels[2]),
            ],
        }
    }

    /// Two-layer 8 px config used for gradient checks; 8×14 input gives a 1×4 grid.
    pub fn toy(feature_dim: usize) -> Self {
        EncoderConfig {
            input_height: 8,
            layers: vec![ConvSpec::new(4).pool(2, 2), ConvSpec::new(feature_dim)],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::input("encoder needs at least one conv layer"));
        }
        if self.feature_dim() < 8 {
            return Err(Error::input(format!(
                "final channel count must be at least 8, got {}",
                self.feature_dim()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let bad_pool = l.pool.is_some_and(|(a, b)| a == 0 || b == 0);
            if l.out_channels == 0 || l.stride.0 == 0 || l.stride.1 == 0 || bad_pool {
                return Err(Error::input(format!("layer {i} has a zero-sized parameter")));
            }
        }
        if self.grid_rows().is_none() {
            return Err(Error::input(format!(
                "input height {} collapses to nothing",
                self.input_height
            )));
        }
        Ok(())
    }

    fn axis_out(&self, mut n: usize, vertical: bool) -> Option<usize> {
        for l in &self.layers {
            let s = if vertical { l.stride.0 } else { l.stride.1 };
            let padded = n + 2 * l.padding;
            if padded < KERNEL {
                return None;
            }
            n = (padded - KERNEL) / s + 1;
            if let Some(p) = l.pool {
                n /= if vertical { p.0 } else { p.1 };
            }
            if n == 0 {
                return None;
            }
        }
        Some(n)
    }

    pub fn grid_rows(&self) -> Option<usize> {
        self.axis_out(self.input_height, true)
    }

    pub fn grid_cols(&self, width: usize) -> Option<usize> {
        self.axis_out(width, false)
    }

    /// Smallest image width producing at least one grid column.
    pub fn min_width(&self) -> usize {
        (1..).find(|&w| self.grid_cols(w).is_some()).unwrap()
    }

    /// Image coordinates (row, col) of the receptive-field center of grid cell (0, 0)
    /// and the spacing between neighbouring cells along each axis.
    fn receptive_geometry(&self) -> ((f64, f64), (f64, f64)) {
        let mut start = (0.0, 0.0);
        let mut jump = (1.0, 1.0);
        for l in &self.layers {
            let off = (KERNEL as f64 - 1.0) / 2.0 - l.padding as f64;
            start = (start.0 + off * jump.0, start.1 + off * jump.1);
            jump = (jump.0 * l.stride.0 as f64, jump.1 * l.stride.1 as f64);
            if let Some((ph, pw)) = l.pool {
                start = (
                    start.0 + (ph as f64 - 1.0) / 2.0 * jump.0,
                    start.1 + (pw as f64 - 1.0) / 2.0 * jump.1,
                );
                jump = (jump.0 * ph as f64, jump.1 * pw as f64);
            }
        }
        (start, jump)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// out_channels × (in_channels·9)
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Self {
        let mut in_ch = 1;
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let fan_in = in_ch * KERNEL * KERNEL;
                let fan_out = l.out_channels * KERNEL * KERNEL;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let p = ConvParams {
                    weight: Tensor::uniform(&[l.out_channels, fan_in], bound, rng),
                    bias: Tensor::zeros(&[l.out_channels]),
                };
                in_ch = l.out_channels;
                p
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut in_ch = 1;
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let p = ConvParams {
                    weight: Tensor::zeros(&[l.out_channels, in_ch * KERNEL * KERNEL]),
                    bias: Tensor::zeros(&[l.out_channels]),
                };
                in_ch = l.out_channels;
                p
            })
            .collect();
        EncoderParams { layers }
    }

    fn check(&self, config: &EncoderConfig) -> Result<()> {
        if self.layers.len() != config.layers.len() {
            return Err(Error::shape(format!(
                "encoder has {} weight layers but config lists {}",
                self.layers.len(),
                config.layers.len()
            )));
        }
        let mut in_ch = 1;
        for (i, (p, l)) in self.layers.iter().zip(&config.layers).enumerate() {
            let want = [l.out_channels, in_ch * KERNEL * KERNEL];
            if p.weight.shape() != want || p.bias.shape() != [l.out_channels] {
                return Err(Error::shape(format!(
                    "layer {i}: weight {:?} / bias {:?}, expected {:?} / [{}]",
                    p.weight.shape(),
                    p.bias.shape(),
                    want,
                    l.out_channels
                )));
            }
            in_ch = l.out_channels;
        }
        Ok(())
    }
}

/// The encoder output: `K = rows·cols` feature vectors of dimension `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    /// K×D, cell `r·cols + c` at row `r`.
    pub vectors: Tensor,
    /// Receptive-field center (row, col) in image pixels for every cell.
    pub centers: Vec<(f64, f64)>,
}

impl FeatureGrid {
    pub fn from_vectors(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 {
            return Err(Error::shape(format!(
                "feature grid needs a non-empty K×D matrix, got {:?}",
                vectors.shape()
            )));
        }
        let k = vectors.rows();
        Ok(FeatureGrid {
            rows: 1,
            cols: k,
            centers: (0..k).map(|c| (0.0, c as f64)).collect(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn mean(&self) -> Vec<f64> {
        let (k, d) = (self.len(), self.dim());
        let mut m = vec![0.0; d];
        for i in 0..k {
            for (mv, x) in m.iter_mut().zip(self.cell(i)) {
                *mv += x;
            }
        }
        m.iter_mut().for_each(|v| *v /= k as f64);
        m
    }
}

struct LayerCache {
    in_h: usize,
    in_w: usize,
    in_ch: usize,
    conv_h: usize,
    conv_w: usize,
    cols: Vec<f64>,
    /// post-ReLU activations (out_ch × conv_h × conv_w)
    act: Vec<f64>,
    /// for each pooled output, the flat index into `act` of the selected max
    argmax: Option<Vec<usize>>,
}

/// Intermediates from [`encode_with_cache`] needed by [`encoder_backward`].
pub struct EncoderCache {
    layers: Vec<LayerCache>,
    height: usize,
    width: usize,
    out_rows: usize,
    out_cols: usize,
}

/// Normalizes the image (per-image mean subtraction) and runs the conv stack.
pub fn encode(config: &EncoderConfig, params: &EncoderParams, image: &GrayImage) -> Result<FeatureGrid> {
    encode_with_cache(config, params, image).map(|(g, _)| g)
}

pub fn encode_with_cache(
    config: &EncoderConfig,
    params: &EncoderParams,
    image: &GrayImage,
) -> Result<(FeatureGrid, EncoderCache)> {
    params.check(config)?;
    if image.height() != config.input_height {
        return Err(Error::shape(format!(
            "image height {} does not match encoder input height {}",
            image.height(),
            config.input_height
        )));
    }
    let min_w = config.min_width();
    if image.width() < min_w {
        return Err(Error::shape(format!(
            "image width {} is below the minimum width {min_w}",
            image.width()
        )));
    }

    let px = image.pixels();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let mut x: Vec<f64> = px.iter().map(|v| v - mean).collect();
    let (mut h, mut w, mut ch) = (image.height(), image.width(), 1);
    let mut caches = Vec::with_capacity(config.layers.len());

    for (spec, p) in config.layers.iter().zip(&params.layers) {
        let oc = spec.out_channels;
        let conv_h = (h + 2 * spec.padding - KERNEL) / spec.stride.0 + 1;
        let conv_w = (w + 2 * spec.padding - KERNEL) / spec.stride.1 + 1;
        let positions = conv_h * conv_w;
        let cols = im2col(&x, ch, h, w, spec, conv_h, conv_w);

        let mut act = vec![0.0; oc * positions];
        for (o, row) in act.chunks_mut(positions).enumerate() {
            row.fill(p.bias.data()[o]);
        }
        gemm_acc(oc, ch * KERNEL * KERNEL, positions, p.weight.data(), &cols, &mut act);
        act.iter_mut().for_each(|v| *v = v.max(0.0));

        let (next, nh, nw, argmax) = match spec.pool {
            Some((ph, pw)) => {
                let (out, am, nh, nw) = max_pool(&act, oc, conv_h, conv_w, ph, pw);
                (out, nh, nw, Some(am))
            }
            None => (act.clone(), conv_h, conv_w, None),
        };
        caches.push(LayerCache {
            in_h: h,
            in_w: w,
            in_ch: ch,
            conv_h,
            conv_w,
            cols,
            act,
            argmax,
        });
        x = next;
        h = nh;
        w = nw;
        ch = oc;
    }

    let k = h * w;
    let mut vectors = vec![0.0; k * ch];
    for d in 0..ch {
        for cell in 0..k {
            vectors[cell * ch + d] = x[d * k + cell];
        }
    }
    let ((r0, c0), (jr, jc)) = config.receptive_geometry();
    let centers = (0..k)
        .map(|cell| (r0 + (cell / w) as f64 * jr, c0 + (cell % w) as f64 * jc))
        .collect();
    let grid = FeatureGrid {
        rows: h,
        cols: w,
        vectors: Tensor::matrix(k, ch, vectors)?,
        centers,
    };
    let cache = EncoderCache {
        layers: caches,
        height: image.height(),
        width: image.width(),
        out_rows: h,
        out_cols: w,
    };
    Ok((grid, cache))
}

/// Back-propagates `grad_out` (K×D, gradient of the loss w.r.t. the feature
/// grid) to every encoder weight and to the input image pixels.
pub fn encoder_backward(
    config: &EncoderConfig,
    params: &EncoderParams,
    cache: &EncoderCache,
    grad_out: &Tensor,
) -> Result<(EncoderParams, GrayImage)> {
    let (grads, g) = backward(config, params, cache, grad_out, true)?;
    let g = g.expect("input gradient requested");
    // through the mean subtraction: dx_j = g_j − mean(g)
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    let input_grad = GrayImage::new(cache.height, cache.width, g.iter().map(|v| v - mean).collect())?;
    Ok((grads, input_grad))
}

/// Weight gradients only; skips the input-image gradient.
pub fn encoder_param_grads(
    config: &EncoderConfig,
    params: &EncoderParams,
    cache: &EncoderCache,
    grad_out: &Tensor,
) -> Result<EncoderParams> {
    Ok(backward(config, params, cache, grad_out, false)?.0)
}

fn backward(
    config: &EncoderConfig,
    params: &EncoderParams,
    cache: &EncoderCache,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<(EncoderParams, Option<Vec<f64>>)> {
    let k = cache.out_rows * cache.out_cols;
    let d = config.feature_dim();
    if grad_out.shape() != [k, d] {
        return Err(Error::shape(format!(
            "gradient {:?} does not match cached grid [{k}, {d}]",
            grad_out.shape()
        )));
    }
    if cache.layers.len() != config.layers.len() {
        return Err(Error::shape("cache does not come from this encoder config"));
    }
    let mut grads = EncoderParams::zeros(config);

    let mut g = vec![0.0; k * d];
    for cell in 0..k {
        for c in 0..d {
            g[c * k + cell] = grad_out.data()[cell * d + c];
        }
    }

    for (i, ((spec, p), (lc, gp))) in config
        .layers
        .iter()
        .zip(&params.layers)
        .zip(cache.layers.iter().zip(grads.layers.iter_mut()))
        .enumerate()
        .rev()
    {
        let oc = spec.out_channels;
        let positions = lc.conv_h * lc.conv_w;
        let mut dact = match &lc.argmax {
            Some(am) => {
                let mut da = vec![0.0; lc.act.len()];
                for (gi, &src) in g.iter().zip(am) {
                    da[src] += gi;
                }
                da
            }
            None => g,
        };
        for (dv, &a) in dact.iter_mut().zip(&lc.act) {
            if a <= 0.0 {
                *dv = 0.0;
            }
        }
        let patch = lc.in_ch * KERNEL * KERNEL;
        gemm_nt_acc(oc, positions, patch, &dact, &lc.cols, gp.weight.data_mut());
        for (o, row) in dact.chunks(positions).enumerate() {
            gp.bias.data_mut()[o] += row.iter().sum::<f64>();
        }
        if i == 0 && !want_input {
            return Ok((grads, None));
        }
        let mut dcols = vec![0.0; patch * positions];
        gemm_tn_acc(patch, oc, positions, p.weight.data(), &dact, &mut dcols);
        g = col2im(&dcols, lc.in_ch, lc.in_h, lc.in_w, spec, lc.conv_h, lc.conv_w);
    }
    Ok((grads, Some(g)))
}

fn im2col(
    x: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let positions = oh * ow;
    let mut cols = vec![0.0; ch * KERNEL * KERNEL * positions];
    let pad = spec.padding as isize;
    for c in 0..ch {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * spec.stride.0 + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[c * h * w + iy as usize * w..c * h * w + (iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride.1 + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let positions = oh * ow;
    let mut x = vec![0.0; ch * h * w];
    let pad = spec.padding as isize;
    for c in 0..ch {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * spec.stride.0 + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride.1 + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            x[c * h * w + iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn max_pool(
    act: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let (nh, nw) = (h / ph, w / pw);
    let mut out = vec![0.0; ch * nh * nw];
    let mut argmax = vec![0; ch * nh * nw];
    for c in 0..ch {
        for oy in 0..nh {
            for ox in 0..nw {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let idx = c * h * w + (oy * ph + dy) * w + ox * pw + dx;
                        if act[idx] > best {
                            best = act[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = c * nh * nw + oy * nw + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax, nh, nw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn two_layer() -> EncoderConfig {
        EncoderConfig {
            input_height: 8,
            layers: vec![ConvSpec::new(4).pool(2, 2), ConvSpec::new(8).stride(1, 2)],
        }
    }

    #[test]
    fn default_geometry_matches_4_by_13() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid_rows(), Some(4));
        assert_eq!(cfg.grid_cols(128), Some(13));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::init(&cfg, &mut rng);
        let g = encode(&cfg, &p, &random_image(32, 128, &mut rng)).unwrap();
        assert_eq!((g.rows, g.cols, g.len(), g.dim()), (4, 13, 52, 64));
        assert_eq!(g.centers.len(), 52);
        assert!(g.vectors.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_grid() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(&cfg, &mut rng);
        let g = encode(&cfg, &p, &GrayImage::filled(32, 64, 0.0)).unwrap();
        assert!(g.vectors.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn narrow_image_is_rejected_with_minimum() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::zeros(&cfg);
        let min = cfg.min_width();
        assert_eq!(min, 28);
        let err = encode(&cfg, &p, &GrayImage::filled(32, min - 1, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("28")), "{err}");
        assert!(encode(&cfg, &p, &GrayImage::filled(32, min, 0.0)).is_ok());
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = EncoderConfig::default();
        cfg.layers.clear();
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig::with_channels(&[4, 4, 4]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_is_bit_identical_across_calls() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = EncoderParams::init(&cfg, &mut rng);
        let img = random_image(32, 90, &mut rng);
        assert_eq!(encode(&cfg, &p, &img).unwrap(), encode(&cfg, &p, &img).unwrap());
    }

    #[test]
    fn shifting_by_total_stride_shifts_one_column() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = EncoderParams::init(&cfg, &mut rng);
        for l in &mut p.layers {
            for b in l.bias.data_mut() {
                *b = 0.05;
            }
        }
        // a "glyph" block well inside the image; horizontal stride is 8
        let glyph = |offset: usize| {
            let mut img = GrayImage::filled(32, 128, 0.0);
            for r in 8..24 {
                for c in 0..12 {
                    img.set(r, 40 + offset + c, if (r + c) % 3 == 0 { 1.0 } else { 0.6 });
                }
            }
            img
        };
        let a = encode(&cfg, &p, &glyph(0)).unwrap();
        let b = encode(&cfg, &p, &glyph(8)).unwrap();
        let mut nonzero = 0;
        for r in 0..a.rows {
            for c in 0..a.cols - 1 {
                let x = a.cell(r * a.cols + c);
                let y = b.cell(r * b.cols + c + 1);
                for (u, v) in x.iter().zip(y) {
                    assert!((u - v).abs() < 1e-12);
                }
                nonzero += x.iter().filter(|v| **v != 0.0).count();
            }
        }
        assert!(nonzero > 0);
        assert_eq!(a.centers[1].1 - a.centers[0].1, 8.0);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let cfg = two_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(&cfg, &mut rng);
        let (g, cache) = encode_with_cache(&cfg, &p, &random_image(8, 24, &mut rng)).unwrap();
        let (grads, dx) = encoder_backward(&cfg, &p, &cache, &g.vectors.zeros_like()).unwrap();
        assert!(grads.layers.iter().all(|l| l.weight.max_abs() == 0.0 && l.bias.max_abs() == 0.0));
        assert!(dx.pixels().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let cfg = two_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(&cfg, &mut rng);
        let (_, cache) = encode_with_cache(&cfg, &p, &random_image(8, 24, &mut rng)).unwrap();
        assert!(encoder_backward(&cfg, &p, &cache, &Tensor::zeros(&[3, 3])).is_err());
    }

    fn weighted_loss(grid: &FeatureGrid, w: &[f64]) -> f64 {
        grid.vectors.data().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = two_layer();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut p = EncoderParams::init(&cfg, &mut rng);
            for l in &mut p.layers {
                for b in l.bias.data_mut() {
                    *b = rng.gen_range(0.0..0.2);
                }
            }
            let img = random_image(8, 24, &mut rng);
            let (grid, cache) = encode_with_cache(&cfg, &p, &img).unwrap();
            let w: Vec<f64> = (0..grid.vectors.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upstream = Tensor::new(grid.vectors.shape().to_vec(), w.clone()).unwrap();
            let (grads, dx) = encoder_backward(&cfg, &p, &cache, &upstream).unwrap();

            for li in 0..cfg.layers.len() {
                let fd_w = finite_diff_grad(
                    |t| {
                        let mut q = p.clone();
                        q.layers[li].weight = t.clone();
                        weighted_loss(&encode(&cfg, &q, &img).unwrap(), &w)
                    },
                    &p.layers[li].weight,
                    1e-5,
                )
                .unwrap();
                assert!(max_rel_err(fd_w.data(), grads.layers[li].weight.data()) < 1e-4);
                let fd_b = finite_diff_grad(
                    |t| {
                        let mut q = p.clone();
                        q.layers[li].bias = t.clone();
                        weighted_loss(&encode(&cfg, &q, &img).unwrap(), &w)
                    },
                    &p.layers[li].bias,
                    1e-5,
                )
                .unwrap();
                assert!(max_rel_err(fd_b.data(), grads.layers[li].bias.data()) < 1e-4);
            }

            let x = Tensor::vector(img.pixels().to_vec());
            let fd_x = finite_diff_grad(
                |t| {
                    let im = GrayImage::new(8, 24, t.data().to_vec()).unwrap();
                    weighted_loss(&encode(&cfg, &p, &im).unwrap(), &w)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(max_rel_err(fd_x.data(), dx.pixels()) < 1e-4);
        }
    }

    #[test]
    fn sum_of_features_input_gradient() {
        // Single linear-looking layer so that ReLU is active everywhere:
        // positive image, positive weights and bias.
        let cfg = EncoderConfig {
            input_height: 8,
            layers: vec![ConvSpec::new(8)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = EncoderParams::init(&cfg, &mut rng);
        p.layers[0].weight.data_mut().iter_mut().for_each(|v| *v = v.abs());
        p.layers[0].bias.fill(10.0);
        let img = random_image(8, 12, &mut rng);
        let (grid, cache) = encode_with_cache(&cfg, &p, &img).unwrap();
        let ones = Tensor::new(grid.vectors.shape().to_vec(), vec![1.0; grid.vectors.len()]).unwrap();
        let (_, dx) = encoder_backward(&cfg, &p, &cache, &ones).unwrap();

        // transpose convolution of all-ones: each pixel collects the summed
        // kernel weights of every output position covering it
        let wsum: Vec<f64> = (0..9)
            .map(|t| (0..8).map(|o| p.layers[0].weight.data()[o * 9 + t]).sum())
            .collect();
        let mut expect = vec![0.0; 8 * 12];
        for oy in 0..6 {
            for ox in 0..10 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        expect[(oy + ky) * 12 + ox + kx] += wsum[ky * 3 + kx];
                    }
                }
            }
        }
        let m = expect.iter().sum::<f64>() / expect.len() as f64;
        expect.iter_mut().for_each(|v| *v -= m);

        let fd = finite_diff_grad(
            |t| {
                let im = GrayImage::new(8, 12, t.data().to_vec()).unwrap();
                encode(&cfg, &p, &im).unwrap().vectors.data().iter().sum()
            },
            &Tensor::vector(img.pixels().to_vec()),
            1e-5,
        )
        .unwrap();
        for ((a, b), c) in dx.pixels().iter().zip(&expect).zip(fd.data()) {
            assert!((a - b).abs() < 1e-9);
            assert!((a - c).abs() < 1e-6);
        }
    }
}
