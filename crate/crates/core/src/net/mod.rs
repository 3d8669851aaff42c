//! Small voxel segmentation network shared by the student, the teacher and the
//! refiner: two zero-padded 3x3x3 convolutions with leaky rectifiers, a
//! per-voxel linear head and a softmax.
//!
//! Outputs are evaluated on an *active* voxel set (the occupied voxels of the
//! scene). Inputs outside the active set read as zero, hidden units are
//! computed on the active set dilated by one voxel, and the head runs on the
//! active set only. Inactive voxels report the uniform distribution. With an
//! all-ones active mask this is exactly the dense network.

mod checkpoint;
mod kernels;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry};
pub use optim::{ema_update, optimizer_step, OptState};

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureGrid, GridShape, MaskedPredGrid, ProbGrid};

pub const LEAKY_SLOPE: f64 = 0.01;
const TAPS: usize = 27;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_classes: usize,
    /// Whether the parameter vector carries a learnable mask token of length K.
    pub mask_token: bool,
}

impl NetConfig {
    /// Student / teacher configuration.
    pub fn segmenter(channels: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            in_channels: channels,
            hidden_channels: hidden,
            num_classes,
            mask_token: false,
        }
    }

    /// Refiner configuration: features concatenated with masked predictions.
    pub fn refiner(channels: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            in_channels: channels + num_classes,
            hidden_channels: hidden,
            num_classes,
            mask_token: true,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv1_w: Range<usize>,
    pub conv1_b: Range<usize>,
    pub conv2_w: Range<usize>,
    pub conv2_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub token: Option<Range<usize>>,
    pub len: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let (c, h, k) = (cfg.in_channels, cfg.hidden_channels, cfg.num_classes);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let conv1_w = take(TAPS * c * h);
        let conv1_b = take(h);
        let conv2_w = take(TAPS * h * h);
        let conv2_b = take(h);
        let head_w = take(h * k);
        let head_b = take(k);
        let token = cfg.mask_token.then(|| take(k));
        Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            head_w,
            head_b,
            token,
            len: at,
        }
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameter vector tagged with its configuration.
///
/// Every mutable borrow re-stamps the parameters so forward caches taken
/// before the mutation are rejected by [`backward`].
#[derive(Debug, Clone)]
pub struct NetParams {
    cfg: NetConfig,
    values: Vec<f64>,
    stamp: u64,
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.values == other.values
    }
}

impl NetParams {
    pub fn zeros(cfg: NetConfig) -> Self {
        Self {
            cfg,
            values: vec![0.0; cfg.layout().len],
            stamp: fresh_stamp(),
        }
    }

    /// Glorot-uniform weights, zero biases, zero mask token.
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let layout = cfg.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.len];
        let (c, h, k) = (cfg.in_channels, cfg.hidden_channels, cfg.num_classes);
        let blocks = [
            (layout.conv1_w.clone(), TAPS * c, TAPS * h),
            (layout.conv2_w.clone(), TAPS * h, TAPS * h),
            (layout.head_w.clone(), h, k),
        ];
        for (range, fan_in, fan_out) in blocks {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in &mut values[range] {
                *x = rng.random_range(-bound..bound);
            }
        }
        Self {
            cfg,
            values,
            stamp: fresh_stamp(),
        }
    }

    pub fn from_vec(cfg: NetConfig, values: Vec<f64>) -> Result<Self> {
        if values.len() != cfg.layout().len {
            return Err(Error::ShapeMismatch(format!(
                "parameter length {} != layout length {}",
                values.len(),
                cfg.layout().len
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Self {
            cfg,
            values,
            stamp: fresh_stamp(),
        })
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn token(&self) -> Option<&[f64]> {
        self.cfg.layout().token.map(|r| &self.values[r])
    }
}

/// `Q̄ = (1 - M̃) ⊙ Q + M̃ ⊙ T`.
pub fn mask_token_insert(
    q: &ProbGrid,
    m_tilde: &BinaryMask,
    token: &[f64],
) -> Result<MaskedPredGrid> {
    let shape = q.shape();
    if q.dims() != m_tilde.dims() {
        return Err(Error::ShapeMismatch("mask token insert".into()));
    }
    if token.len() != shape.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "mask token has {} entries, K = {}",
            token.len(),
            shape.num_classes
        )));
    }
    let n = shape.voxels();
    let mut data = q.data().to_vec();
    for v in m_tilde.iter_set() {
        for (k, t) in token.iter().enumerate() {
            data[k * n + v] = *t;
        }
    }
    MaskedPredGrid::from_vec(shape, data)
}

/// Network input: scene features, optionally followed by masked predictions.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub features: &'a FeatureGrid,
    pub predictions: Option<&'a MaskedPredGrid>,
    /// Voxels whose prediction channels carry the mask token; their input
    /// gradient is routed to the token during [`backward`].
    pub token_mask: Option<&'a BinaryMask>,
    pub active: &'a BinaryMask,
}

impl<'a> NetInput<'a> {
    pub fn segmenter(features: &'a FeatureGrid, active: &'a BinaryMask) -> Self {
        Self {
            features,
            predictions: None,
            token_mask: None,
            active,
        }
    }
}

/// Active and dilated voxel sets with their gather tables.
#[derive(Debug, Clone)]
struct Support {
    active: Vec<usize>,
    /// Per dilated voxel, the active-row index of each of its 27 neighbours
    /// (`NONE` when the neighbour is inactive or outside the grid).
    conv1_idx: Vec<u32>,
    /// Per active voxel, the dilated-row index of each of its 27 neighbours.
    conv2_idx: Vec<u32>,
    num_dilated: usize,
}

fn tap_offsets() -> [(isize, isize, isize); TAPS] {
    let mut out = [(0, 0, 0); TAPS];
    let mut i = 0;
    for dh in -1..=1 {
        for dw in -1..=1 {
            for dl in -1..=1 {
                out[i] = (dh, dw, dl);
                i += 1;
            }
        }
    }
    out
}

impl Support {
    fn new(active_mask: &BinaryMask) -> Self {
        let dims = active_mask.dims();
        let n = dims.voxels();
        let offsets = tap_offsets();
        let active: Vec<usize> = active_mask.iter_set().collect();
        let mut active_pos = vec![NONE; n];
        for (i, &v) in active.iter().enumerate() {
            active_pos[v] = i as u32;
        }
        let mut in_dilated = vec![false; n];
        for &v in &active {
            for &(dh, dw, dl) in &offsets {
                if let Some(u) = dims.offset(v, dh, dw, dl) {
                    in_dilated[u] = true;
                }
            }
        }
        let mut dilated_pos = vec![NONE; n];
        let mut conv1_idx = Vec::new();
        let mut num_dilated = 0;
        for v in (0..n).filter(|&v| in_dilated[v]) {
            dilated_pos[v] = num_dilated as u32;
            num_dilated += 1;
            for &(dh, dw, dl) in &offsets {
                conv1_idx.push(dims.offset(v, dh, dw, dl).map_or(NONE, |u| active_pos[u]));
            }
        }
        let mut conv2_idx = Vec::with_capacity(active.len() * TAPS);
        for &v in &active {
            for &(dh, dw, dl) in &offsets {
                conv2_idx.push(dims.offset(v, dh, dw, dl).map_or(NONE, |u| dilated_pos[u]));
            }
        }
        Self {
            active,
            conv1_idx,
            conv2_idx,
            num_dilated,
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    shape: GridShape,
    support: Support,
    /// Input at active voxels, voxel-major (`active x in_channels`).
    input: Vec<f64>,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    probs: ProbGrid,
    /// Active positions carrying the mask token.
    token_positions: Vec<usize>,
}

impl ForwardCache {
    pub fn probs(&self) -> &ProbGrid {
        &self.probs
    }

    pub fn into_probs(self) -> ProbGrid {
        self.probs
    }

    pub fn active_count(&self) -> usize {
        self.support.active.len()
    }
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Runs the network and returns the per-voxel class distribution together with
/// the cache needed by [`backward`].
pub fn forward(params: &NetParams, input: &NetInput<'_>) -> Result<ForwardCache> {
    let cfg = params.cfg;
    let fshape = input.features.shape();
    let dims = fshape.dims;
    let extra = input.predictions.map_or(0, |p| p.shape().num_classes);
    if fshape.channels + extra != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} input channels, got {}",
            cfg.in_channels,
            fshape.channels + extra
        )));
    }
    if input.active.dims() != dims {
        return Err(Error::ShapeMismatch("active mask dims".into()));
    }
    if let Some(p) = input.predictions {
        if p.shape().dims != dims {
            return Err(Error::ShapeMismatch("prediction grid dims".into()));
        }
    }
    if let Some(m) = input.token_mask {
        if m.dims() != dims {
            return Err(Error::ShapeMismatch("token mask dims".into()));
        }
        if !cfg.mask_token {
            return Err(Error::InvalidArgument(
                "token mask given to a network without a mask token".into(),
            ));
        }
    }
    let layout = cfg.layout();
    let w = &params.values;
    let (cin, hid, k) = (cfg.in_channels, cfg.hidden_channels, cfg.num_classes);
    let n = dims.voxels();
    let support = Support::new(input.active);
    let na = support.active.len();
    let nd = support.num_dilated;

    let mut x = vec![0.0; na * cin];
    for (a, &v) in support.active.iter().enumerate() {
        let row = &mut x[a * cin..(a + 1) * cin];
        for (c, r) in row.iter_mut().enumerate().take(fshape.channels) {
            *r = input.features.get(c, v);
        }
        if let Some(p) = input.predictions {
            for kk in 0..extra {
                row[fshape.channels + kk] = p.get(kk, v);
            }
        }
    }
    let token_positions: Vec<usize> = match input.token_mask {
        Some(m) => support
            .active
            .iter()
            .enumerate()
            .filter_map(|(a, &v)| m.get(v).then_some(a))
            .collect(),
        None => Vec::new(),
    };

    // conv1 over the dilated set, reading active inputs only.
    let mut pre1 = vec![0.0; nd * hid];
    kernels::conv_forward(
        &x,
        cin,
        &support.conv1_idx,
        &w[layout.conv1_w.clone()],
        &w[layout.conv1_b.clone()],
        &mut pre1,
    );
    let h1: Vec<f64> = pre1.iter().map(|&z| leaky(z)).collect();

    // conv2 over the active set, reading hidden units on the dilated set.
    let mut pre2 = vec![0.0; na * hid];
    kernels::conv_forward(
        &h1,
        hid,
        &support.conv2_idx,
        &w[layout.conv2_w.clone()],
        &w[layout.conv2_b.clone()],
        &mut pre2,
    );
    let h2: Vec<f64> = pre2.iter().map(|&z| leaky(z)).collect();

    // head + softmax
    let wh = &w[layout.head_w.clone()];
    let bh = &w[layout.head_b.clone()];
    let mut probs = vec![1.0 / k as f64; k * n];
    let mut row = vec![0.0; k];
    for (a, &v) in support.active.iter().enumerate() {
        row.copy_from_slice(bh);
        let hin = &h2[a * hid..(a + 1) * hid];
        for (hh, &hv) in hin.iter().enumerate() {
            let wrow = &wh[hh * k..(hh + 1) * k];
            for (r, &wv) in row.iter_mut().zip(wrow) {
                *r += hv * wv;
            }
        }
        crate::grid::softmax_in_place(&mut row);
        for (kk, &pv) in row.iter().enumerate() {
            probs[kk * n + v] = pv;
        }
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("network output"));
    }
    let pshape = GridShape {
        num_classes: k,
        channels: fshape.channels,
        dims,
    };
    let probs = ProbGrid::from_vec(pshape, probs)?;
    Ok(ForwardCache {
        stamp: params.stamp,
        shape: pshape,
        support,
        input: x,
        pre1,
        h1,
        pre2,
        h2,
        probs,
        token_positions,
    })
}

/// Reverse-mode gradient of `<logits, grad_logits>` with respect to the
/// parameters (mask token included when the forward pass inserted it).
///
/// `grad_logits` is laid out like the output grid; entries at inactive voxels
/// are ignored.
pub fn backward(params: &NetParams, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Vec<f64>> {
    if cache.stamp != params.stamp {
        return Err(Error::StaleCache);
    }
    let cfg = params.cfg;
    let n = cache.shape.voxels();
    let (cin, hid, k) = (cfg.in_channels, cfg.hidden_channels, cfg.num_classes);
    if grad_logits.len() != k * n {
        return Err(Error::ShapeMismatch("gradient grid length".into()));
    }
    let layout = cfg.layout();
    let w = &params.values;
    let sup = &cache.support;
    let na = sup.active.len();
    let nd = sup.num_dilated;
    let mut grad = vec![0.0; layout.len];

    // head
    let mut gpre2 = vec![0.0; na * hid];
    {
        let wh = &w[layout.head_w.clone()];
        let (gw_head, rest) = grad[layout.head_w.start..].split_at_mut(layout.head_w.len());
        let gb_head = &mut rest[..k];
        let mut gz = vec![0.0; k];
        for (a, &v) in sup.active.iter().enumerate() {
            for (kk, g) in gz.iter_mut().enumerate() {
                *g = grad_logits[kk * n + v];
            }
            for (b, g) in gb_head.iter_mut().zip(&gz) {
                *b += g;
            }
            let hin = &cache.h2[a * hid..(a + 1) * hid];
            let gout = &mut gpre2[a * hid..(a + 1) * hid];
            for hh in 0..hid {
                let wrow = &wh[hh * k..(hh + 1) * k];
                let gwrow = &mut gw_head[hh * k..(hh + 1) * k];
                let mut acc = 0.0;
                for kk in 0..k {
                    gwrow[kk] += hin[hh] * gz[kk];
                    acc += wrow[kk] * gz[kk];
                }
                gout[hh] = acc * leaky_grad(cache.pre2[a * hid + hh]);
            }
        }
    }

    // conv2
    let mut gh1 = vec![0.0; nd * hid];
    {
        let (gw2, rest) = grad[layout.conv2_w.start..].split_at_mut(layout.conv2_w.len());
        kernels::conv_backward(
            &cache.h1,
            hid,
            &sup.conv2_idx,
            &w[layout.conv2_w.clone()],
            &gpre2,
            gw2,
            &mut rest[..hid],
            Some(&mut gh1),
        );
    }
    for (g, &z) in gh1.iter_mut().zip(&cache.pre1) {
        *g *= leaky_grad(z);
    }

    // conv1; input gradients are needed only where the mask token sits.
    let mut gx = if cache.token_positions.is_empty() {
        Vec::new()
    } else {
        vec![0.0; na * cin]
    };
    {
        let (gw1, rest) = grad[layout.conv1_w.start..].split_at_mut(layout.conv1_w.len());
        kernels::conv_backward(
            &cache.input,
            cin,
            &sup.conv1_idx,
            &w[layout.conv1_w.clone()],
            &gh1,
            gw1,
            &mut rest[..hid],
            (!gx.is_empty()).then_some(gx.as_mut_slice()),
        );
    }

    if let Some(tok) = layout.token.clone() {
        let pred_start = cin - k;
        let gt = &mut grad[tok];
        for &a in &cache.token_positions {
            let row = &gx[a * cin..(a + 1) * cin];
            for (g, &x) in gt.iter_mut().zip(&row[pred_start..]) {
                *g += x;
            }
        }
    }
    Ok(grad)
}

/// Refiner forward: splices the mask token into `q` on `m_tilde`, concatenates
/// with the features and runs the network.
pub fn refine_forward(
    params: &NetParams,
    features: &FeatureGrid,
    q: &ProbGrid,
    m_tilde: &BinaryMask,
    active: &BinaryMask,
) -> Result<ForwardCache> {
    let token = params
        .token()
        .ok_or_else(|| Error::InvalidArgument("refiner parameters carry no mask token".into()))?;
    let q_bar = mask_token_insert(q, m_tilde, token)?;
    forward(
        params,
        &NetInput {
            features,
            predictions: Some(&q_bar),
            token_mask: Some(m_tilde),
            active,
        },
    )
}
