//! A small 2D encoder–decoder segmentation network, student/teacher pairs
//! with EMA maintenance, and averaged / sliding-window inference.
//!
//! The network is a plain U-shape: `depth` levels of conv3x3+relu+maxpool,
//! a conv3x3 bottleneck, then nearest-upsample + skip-concat + conv3x3 per
//! level, and a conv1x1+sigmoid head producing one foreground probability
//! per pixel. No dropout or normalization layers — teacher and student
//! differ only by their parameters, which keeps the EMA semantics exact and
//! runs deterministic.
//!
//! Parameter count of the default config (base 8, depth 2) has the closed
//! form `sum(9*c_in*c_out + c_out)` over the six layers = 14_561; see
//! [`SegNetConfig::param_count`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{cast, no_grad, ParamSet, Scalar, Tensor, TensorError, TensorResult};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub out_channels: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            in_channels: 1,
            base_filters: 8,
            depth: 2,
            out_channels: 1,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if self.depth < 1 || self.base_filters < 1 || self.in_channels < 1 {
            return Err(TensorError::InvalidArg {
                op: "segnet_config",
                msg: "depth, base_filters and in_channels must be >= 1".into(),
            });
        }
        if self.out_channels != 1 {
            return Err(TensorError::InvalidArg {
                op: "segnet_config",
                msg: "only a single sigmoid output channel is supported".into(),
            });
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.depth
    }

    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        // (name, c_in, c_out, kernel)
        let f = self.base_filters;
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for i in 0..self.depth {
            let c_out = f << i;
            out.push((format!("enc{i}"), c_in, c_out, 3));
            c_in = c_out;
        }
        out.push(("bottleneck".into(), c_in, f << self.depth, 3));
        let mut above = f << self.depth;
        for i in (0..self.depth).rev() {
            let skip = f << i;
            out.push((format!("dec{i}"), above + skip, skip, 3));
            above = skip;
        }
        out.push(("head".into(), f, self.out_channels, 1));
        out
    }

    /// Closed-form parameter count: `sum(k^2 * c_in * c_out + c_out)`.
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, ci, co, k)| k * k * ci * co + co)
            .sum()
    }
}

/// The network itself: a validated config. Parameters live in [`ParamSet`]s
/// so one architecture can drive many parameter sets (student, teacher,
/// peers).
#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: SegNetConfig,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig) -> TensorResult<Self> {
        cfg.validate()?;
        Ok(SegNet { cfg })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    /// He-uniform conv weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`), zero
    /// biases, drawn from a ChaCha stream seeded by `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, c_in, c_out, k) in self.cfg.layers() {
            let fan_in = (c_in * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<T> = (0..c_out * c_in * k * k)
                .map(|_| cast::<T>(rng.gen::<f64>() * 2.0 * bound - bound))
                .collect();
            let wt = Tensor::leaf(w, vec![c_out, c_in, k, k], true);
            let bt = Tensor::leaf(vec![T::zero(); c_out], vec![c_out], true);
            params.push(format!("{name}.weight"), wt).expect("unique layer names");
            params.push(format!("{name}.bias"), bt).expect("unique layer names");
        }
        params
    }

    fn layer<'p, T: Scalar>(
        params: &'p ParamSet<T>,
        name: &str,
    ) -> TensorResult<(&'p Tensor<T>, &'p Tensor<T>)> {
        let w = params
            .get(&format!("{name}.weight"))
            .ok_or_else(|| TensorError::InvalidArg {
                op: "segnet_forward",
                msg: format!("missing parameter {name}.weight"),
            })?;
        let b = params
            .get(&format!("{name}.bias"))
            .ok_or_else(|| TensorError::InvalidArg {
                op: "segnet_forward",
                msg: format!("missing parameter {name}.bias"),
            })?;
        Ok((w, b))
    }

    /// Forward pass: `[N,C,H,W]` in, per-pixel probability `[N,1,H,W]` out.
    /// H and W must be divisible by `2^depth`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
    ) -> TensorResult<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(TensorError::InvalidArg {
                op: "segnet_forward",
                msg: format!(
                    "expected [N,{},H,W], got {:?}",
                    self.cfg.in_channels, s
                ),
            });
        }
        let fac = self.cfg.downsample_factor();
        if s[2] % fac != 0 || s[3] % fac != 0 {
            return Err(TensorError::InvalidArg {
                op: "segnet_forward",
                msg: format!("spatial dims {}x{} not divisible by {}", s[2], s[3], fac),
            });
        }
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            let (w, b) = Self::layer(params, &format!("enc{i}"))?;
            cur = cur.conv2d(w, b, 1, 1)?.relu()?;
            skips.push(cur.clone());
            cur = cur.maxpool2x()?;
        }
        let (w, b) = Self::layer(params, "bottleneck")?;
        cur = cur.conv2d(w, b, 1, 1)?.relu()?;
        for i in (0..self.cfg.depth).rev() {
            cur = cur.upsample2x_nearest()?;
            cur = Tensor::concat(&[cur, skips[i].clone()], 1)?;
            let (w, b) = Self::layer(params, &format!("dec{i}"))?;
            cur = cur.conv2d(w, b, 1, 1)?.relu()?;
        }
        let (w, b) = Self::layer(params, "head")?;
        cur.conv2d(w, b, 1, 0)?.sigmoid()
    }
}

/// Which half of a pair to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Student,
    Teacher,
}

/// One student parameter set plus its EMA teacher.
pub struct ModelPair<T: Scalar = f32> {
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub ema_alpha: f64,
    pub pair_id: usize,
}

impl<T: Scalar> ModelPair<T> {
    /// Initializes the student from `seed` and the teacher as an exact copy.
    pub fn init(net: &SegNet, seed: u64, ema_alpha: f64, pair_id: usize) -> Self {
        let student = net.init_params::<T>(seed);
        let teacher = student.deep_clone();
        teacher.set_requires_grad(false);
        ModelPair {
            student,
            teacher,
            ema_alpha,
            pair_id,
        }
    }

    pub(crate) fn from_parts(
        student: ParamSet<T>,
        teacher: ParamSet<T>,
        ema_alpha: f64,
        pair_id: usize,
    ) -> Self {
        student.set_requires_grad(true);
        teacher.set_requires_grad(false);
        ModelPair {
            student,
            teacher,
            ema_alpha,
            pair_id,
        }
    }

    /// EMA teacher update: `theta_t <- alpha * theta_t + (1 - alpha) * theta_s`
    /// elementwise over every parameter.
    pub fn ema_update(&self) -> TensorResult<()> {
        let a = cast::<T>(self.ema_alpha);
        let one_m = T::one() - a;
        for ((tn, tt), (sn, st)) in self.teacher.iter().zip(self.student.iter()) {
            if tn != sn || tt.shape() != st.shape() {
                return Err(TensorError::InvalidArg {
                    op: "ema_update",
                    msg: format!("teacher/student mismatch at {tn} vs {sn}"),
                });
            }
            st.with_data(|s| {
                tt.with_data_mut(|t| {
                    for (tv, &sv) in t.iter_mut().zip(s) {
                        *tv = a * *tv + one_m * sv;
                    }
                })
            });
        }
        Ok(())
    }

    /// Forward through student or teacher. Gradients are recorded only for
    /// `Student` with `train_mode = true`; the teacher never builds a graph.
    pub fn forward(
        &self,
        net: &SegNet,
        which: Which,
        x: &Tensor<T>,
        train_mode: bool,
    ) -> TensorResult<Tensor<T>> {
        match which {
            Which::Student if train_mode => net.forward(&self.student, x),
            Which::Student => no_grad(|| net.forward(&self.student, x)),
            Which::Teacher => no_grad(|| net.forward(&self.teacher, x)),
        }
    }
}

/// Mean of the pairs' student probability maps plus its thresholded mask.
///
/// Returns `(soft mean [N,1,H,W], binary mask as 0/1 bytes)`; a pixel is
/// foreground when `soft > threshold` (strict, so a constant map exactly at
/// the threshold binarizes to empty).
pub fn infer_averaged<T: Scalar>(
    net: &SegNet,
    pairs: &[ModelPair<T>],
    x: &Tensor<T>,
    threshold: f64,
) -> TensorResult<(Tensor<T>, Vec<u8>)> {
    if pairs.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "infer_averaged",
            msg: "empty pair list".into(),
        });
    }
    no_grad(|| {
        let mut acc = pairs[0].forward(net, Which::Student, x, false)?;
        for p in &pairs[1..] {
            acc = acc.add(&p.forward(net, Which::Student, x, false)?)?;
        }
        let soft = acc.div_scalar(cast::<T>(pairs.len() as f64))?;
        let thr = cast::<T>(threshold);
        let mask = soft.with_data(|d| d.iter().map(|&v| u8::from(v > thr)).collect());
        Ok((soft, mask))
    })
}

/// Window origins along one axis: every multiple of `stride`, with a final
/// window clamped to the edge so coverage is total.
fn window_origins(extent: usize, win: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&r| r + win <= extent)
        .collect();
    let last = extent - win;
    if *out.last().unwrap_or(&usize::MAX) != last {
        out.push(last);
    }
    out
}

/// Core sliding-window accumulation, decoupled from the network so the
/// bookkeeping can be tested against hand-computed coverage.
fn sliding_accumulate<F>(
    dims: (usize, usize),
    window: (usize, usize),
    stride: (usize, usize),
    mut predict: F,
) -> TensorResult<Vec<f64>>
where
    F: FnMut(usize, usize) -> TensorResult<Vec<f64>>,
{
    let (h, w) = dims;
    let (wh, ww) = window;
    if wh > h || ww > w {
        return Err(TensorError::InvalidArg {
            op: "infer_sliding",
            msg: format!("window {wh}x{ww} larger than image {h}x{w}"),
        });
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(TensorError::InvalidArg {
            op: "infer_sliding",
            msg: "strides must be >= 1".into(),
        });
    }
    // A stride beyond the window would leave pixels no window touches;
    // with stride <= window, consecutive spans overlap or abut, so the
    // clamped final window makes coverage total.
    if stride.0 > wh || stride.1 > ww {
        return Err(TensorError::InvalidArg {
            op: "infer_sliding",
            msg: format!(
                "stride {}x{} exceeds window {wh}x{ww}, leaving coverage gaps",
                stride.0, stride.1
            ),
        });
    }
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0.0f64; h * w];
    for &r in &window_origins(h, wh, stride.0) {
        for &c in &window_origins(w, ww, stride.1) {
            let patch = predict(r, c)?;
            for y in 0..wh {
                for x in 0..ww {
                    sum[(r + y) * w + c + x] += patch[y * ww + x];
                    count[(r + y) * w + c + x] += 1.0;
                }
            }
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, c)| s / c).collect())
}

/// Sliding-window inference over a single `H x W` image: overlapping window
/// predictions averaged per pixel by coverage count.
pub fn infer_sliding<T: Scalar>(
    net: &SegNet,
    pairs: &[ModelPair<T>],
    image: &[f64],
    dims: (usize, usize),
    window: (usize, usize),
    stride: (usize, usize),
) -> TensorResult<Vec<f64>> {
    if pairs.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "infer_sliding",
            msg: "empty pair list".into(),
        });
    }
    let (h, w) = dims;
    if image.len() != h * w {
        return Err(TensorError::InvalidArg {
            op: "infer_sliding",
            msg: format!("image buffer is {} values, dims say {}", image.len(), h * w),
        });
    }
    let (wh, ww) = window;
    sliding_accumulate(dims, window, stride, |r, c| {
        let mut patch = Vec::with_capacity(wh * ww);
        for y in 0..wh {
            for x in 0..ww {
                patch.push(cast::<T>(image[(r + y) * w + c + x]));
            }
        }
        let xt = Tensor::leaf(patch, vec![1, 1, wh, ww], false);
        let (soft, _) = infer_averaged(net, pairs, &xt, 0.5)?;
        Ok(soft.with_data(|d| d.iter().map(|v| v.to_f64().unwrap()).collect()))
    })
}
