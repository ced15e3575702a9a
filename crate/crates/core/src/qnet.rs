//! Dueling Q-network: a two-layer trunk feeding separate value and
//! advantage streams, combined as Q(s,a) = V(s) + A(s,a) - mean(A).
//!
//! The net is small enough (about ten thousand weights at the default
//! size) that hand-rolled dense algebra beats pulling in a tensor
//! framework: forward passes cache pre-activations, `backward`
//! accumulates exact reverse-mode gradients, and Adam updates the flat
//! parameter vector in place.

use std::io::{Read as _, Write as _};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Normalizer;
use crate::seeding::stream_rng;

/// Network shape. Defaults reproduce the dosing architecture: 19 inputs,
/// two 64-unit trunk layers, equally sized 32-unit value and advantage
/// streams, 14 actions, Leaky-ReLU slope 0.01 throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub state_dim: usize,
    pub actions: usize,
    pub hidden: usize,
    pub stream_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            state_dim: 19,
            actions: 14,
            hidden: 64,
            stream_hidden: 32,
            leaky_slope: 0.01,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.actions == 0 || self.hidden == 0 || self.stream_hidden == 0
        {
            return Err(Error::InvalidParameter(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "leaky slope {} outside [0,1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Byte offsets of each weight matrix and bias vector inside the flat
/// parameter vector. Matrices are row-major `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub vw1: Range<usize>,
    pub vb1: Range<usize>,
    pub vw2: Range<usize>,
    pub vb2: Range<usize>,
    pub aw1: Range<usize>,
    pub ab1: Range<usize>,
    pub aw2: Range<usize>,
    pub ab2: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut at = 0usize;
        let mut seg = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let (d, a, h, s) = (cfg.state_dim, cfg.actions, cfg.hidden, cfg.stream_hidden);
        let layout = Layout {
            w1: seg(h * d),
            b1: seg(h),
            w2: seg(h * h),
            b2: seg(h),
            vw1: seg(s * h),
            vb1: seg(s),
            vw2: seg(s),
            vb2: seg(1),
            aw1: seg(s * h),
            ab1: seg(s),
            aw2: seg(a * s),
            ab2: seg(a),
            total: 0,
        };
        Layout { total: at, ..layout }
    }
}

/// y = W x + b for a row-major `[rows x cols]` matrix.
fn matvec(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize, y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        y[r] = b[r] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
    }
}

/// dL/dx += W^T dy and dL/dW += dy x^T, dL/db += dy, all accumulated.
#[allow(clippy::too_many_arguments)]
fn matvec_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for r in 0..rows {
        db[r] += dy[r];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += dy[r] * x[c];
        }
    }
    if let Some(dx) = dx {
        for c in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += w[r * cols + c] * dy[r];
            }
            dx[c] += acc;
        }
    }
}

fn leaky(pre: &mut [f64], slope: f64) {
    for v in pre {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

fn leaky_grad(pre: f64, slope: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Intermediate activations kept for the backward pass. `version` pins the
/// cache to the parameter state it was computed from.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub version: u64,
    pub x: Vec<f64>,
    pub pre1: Vec<f64>,
    pub h1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub h2: Vec<f64>,
    pub pre_v: Vec<f64>,
    pub vh: Vec<f64>,
    pub value: f64,
    pub pre_a: Vec<f64>,
    pub ah: Vec<f64>,
    pub adv: Vec<f64>,
    pub q: Vec<f64>,
}

/// The dueling Q-network: configuration, layout, and one flat parameter
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub cfg: NetConfig,
    layout: Layout,
    pub params: Vec<f64>,
    /// Bumped on every parameter update; forward caches carry the version
    /// they were computed under so stale caches are rejected.
    version: u64,
}

impl QNet {
    /// He-uniform initialization from the given RNG stream; biases start
    /// at zero.
    pub fn init(cfg: NetConfig, master_seed: u64, stream: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = stream_rng(master_seed, stream);
        let gain_sq = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
        let mut fill = |range: Range<usize>, fan_in: usize, params: &mut [f64]| {
            let limit = (3.0 * gain_sq / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-limit..limit);
            }
        };
        fill(layout.w1.clone(), cfg.state_dim, &mut params);
        fill(layout.w2.clone(), cfg.hidden, &mut params);
        fill(layout.vw1.clone(), cfg.hidden, &mut params);
        fill(layout.vw2.clone(), cfg.stream_hidden, &mut params);
        fill(layout.aw1.clone(), cfg.hidden, &mut params);
        fill(layout.aw2.clone(), cfg.stream_hidden, &mut params);
        Ok(QNet {
            cfg,
            layout,
            params,
            version: 0,
        })
    }

    /// Builds a net from an existing parameter vector (checkpoint load,
    /// fixtures).
    pub fn from_params(cfg: NetConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(QNet {
            cfg,
            layout,
            params,
            version: 0,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn seg(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    /// Q-values for one (already normalized) state.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.q)
    }

    /// Forward pass that retains every intermediate needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        let (cfg, l) = (&self.cfg, &self.layout);
        if x.len() != cfg.state_dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.state_dim,
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }

        let mut pre1 = vec![0.0; cfg.hidden];
        matvec(self.seg(&l.w1), self.seg(&l.b1), x, cfg.hidden, cfg.state_dim, &mut pre1);
        let mut h1 = pre1.clone();
        leaky(&mut h1, cfg.leaky_slope);

        let mut pre2 = vec![0.0; cfg.hidden];
        matvec(self.seg(&l.w2), self.seg(&l.b2), &h1, cfg.hidden, cfg.hidden, &mut pre2);
        let mut h2 = pre2.clone();
        leaky(&mut h2, cfg.leaky_slope);

        let mut pre_v = vec![0.0; cfg.stream_hidden];
        matvec(self.seg(&l.vw1), self.seg(&l.vb1), &h2, cfg.stream_hidden, cfg.hidden, &mut pre_v);
        let mut vh = pre_v.clone();
        leaky(&mut vh, cfg.leaky_slope);
        let mut value = [0.0];
        matvec(self.seg(&l.vw2), self.seg(&l.vb2), &vh, 1, cfg.stream_hidden, &mut value);
        let value = value[0];

        let mut pre_a = vec![0.0; cfg.stream_hidden];
        matvec(self.seg(&l.aw1), self.seg(&l.ab1), &h2, cfg.stream_hidden, cfg.hidden, &mut pre_a);
        let mut ah = pre_a.clone();
        leaky(&mut ah, cfg.leaky_slope);
        let mut adv = vec![0.0; cfg.actions];
        matvec(self.seg(&l.aw2), self.seg(&l.ab2), &ah, cfg.actions, cfg.stream_hidden, &mut adv);

        let adv_mean = adv.iter().sum::<f64>() / cfg.actions as f64;
        let q: Vec<f64> = adv.iter().map(|a| value + a - adv_mean).collect();
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("q-values".into()));
        }
        Ok(ForwardCache {
            version: self.version,
            x: x.to_vec(),
            pre1,
            h1,
            pre2,
            h2,
            pre_v,
            vh,
            value,
            pre_a,
            ah,
            adv,
            q,
        })
    }

    /// Accumulates dL/dparams into `grads` given dL/dq for one sample.
    /// `grads` must have `param_count()` entries; the caller zeroes it at
    /// batch start and scales `dq` by any per-sample weight.
    pub fn backward(&self, cache: &ForwardCache, dq: &[f64], grads: &mut [f64]) -> Result<()> {
        let (cfg, l) = (&self.cfg, &self.layout);
        if cache.version != self.version {
            return Err(Error::Internal(format!(
                "stale forward cache: computed at version {}, parameters now at {}",
                cache.version, self.version
            )));
        }
        if dq.len() != cfg.actions {
            return Err(Error::DimensionMismatch {
                expected: cfg.actions,
                got: dq.len(),
            });
        }
        if grads.len() != l.total {
            return Err(Error::DimensionMismatch {
                expected: l.total,
                got: grads.len(),
            });
        }

        // Q_a = V + A_a - mean(A): dV = sum(dq), dA_a = dq_a - mean(dq).
        let dq_sum: f64 = dq.iter().sum();
        let dq_mean = dq_sum / cfg.actions as f64;
        let dadv: Vec<f64> = dq.iter().map(|g| g - dq_mean).collect();
        let dvalue = [dq_sum];

        let (mut dh2_v, mut dh2_a) = (vec![0.0; cfg.hidden], vec![0.0; cfg.hidden]);

        // Value stream.
        let mut dvh = vec![0.0; cfg.stream_hidden];
        split_backward(
            &mut SegGrads::new(grads, &l.vw2, &l.vb2),
            self.seg(&l.vw2),
            &cache.vh,
            &dvalue,
            1,
            cfg.stream_hidden,
            Some(&mut dvh),
        );
        let dpre_v: Vec<f64> = dvh
            .iter()
            .zip(&cache.pre_v)
            .map(|(g, p)| g * leaky_grad(*p, cfg.leaky_slope))
            .collect();
        split_backward(
            &mut SegGrads::new(grads, &l.vw1, &l.vb1),
            self.seg(&l.vw1),
            &cache.h2,
            &dpre_v,
            cfg.stream_hidden,
            cfg.hidden,
            Some(&mut dh2_v),
        );

        // Advantage stream.
        let mut dah = vec![0.0; cfg.stream_hidden];
        split_backward(
            &mut SegGrads::new(grads, &l.aw2, &l.ab2),
            self.seg(&l.aw2),
            &cache.ah,
            &dadv,
            cfg.actions,
            cfg.stream_hidden,
            Some(&mut dah),
        );
        let dpre_a: Vec<f64> = dah
            .iter()
            .zip(&cache.pre_a)
            .map(|(g, p)| g * leaky_grad(*p, cfg.leaky_slope))
            .collect();
        split_backward(
            &mut SegGrads::new(grads, &l.aw1, &l.ab1),
            self.seg(&l.aw1),
            &cache.h2,
            &dpre_a,
            cfg.stream_hidden,
            cfg.hidden,
            Some(&mut dh2_a),
        );

        // Trunk.
        let dh2: Vec<f64> = dh2_v.iter().zip(&dh2_a).map(|(a, b)| a + b).collect();
        let dpre2: Vec<f64> = dh2
            .iter()
            .zip(&cache.pre2)
            .map(|(g, p)| g * leaky_grad(*p, cfg.leaky_slope))
            .collect();
        let mut dh1 = vec![0.0; cfg.hidden];
        split_backward(
            &mut SegGrads::new(grads, &l.w2, &l.b2),
            self.seg(&l.w2),
            &cache.h1,
            &dpre2,
            cfg.hidden,
            cfg.hidden,
            Some(&mut dh1),
        );
        let dpre1: Vec<f64> = dh1
            .iter()
            .zip(&cache.pre1)
            .map(|(g, p)| g * leaky_grad(*p, cfg.leaky_slope))
            .collect();
        split_backward(
            &mut SegGrads::new(grads, &l.w1, &l.b1),
            self.seg(&l.w1),
            &cache.x,
            &dpre1,
            cfg.hidden,
            cfg.state_dim,
            None,
        );
        Ok(())
    }

    /// Applies one optimizer step and invalidates outstanding caches.
    pub fn apply_update(&mut self, opt: &mut Adam, grads: &[f64]) -> Result<()> {
        opt.step(&mut self.params, grads)?;
        self.version += 1;
        Ok(())
    }

    /// Hard target-network sync: copies parameters, keeping the target's
    /// own version counter monotone.
    pub fn copy_from(&mut self, other: &QNet) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::Config("target/online configs differ".into()));
        }
        self.params.copy_from_slice(&other.params);
        self.version += 1;
        Ok(())
    }
}

/// Borrow helper: grads is one flat vector, but each layer backward needs
/// simultaneous mutable access to its weight and bias segments.
struct SegGrads<'a> {
    dw: &'a mut [f64],
    db: &'a mut [f64],
}

impl<'a> SegGrads<'a> {
    fn new(grads: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> Self {
        debug_assert_eq!(w.end, b.start, "bias segment must follow its weights");
        let (_, rest) = grads.split_at_mut(w.start);
        let (dw, rest) = rest.split_at_mut(w.end - w.start);
        let (db, _) = rest.split_at_mut(b.end - b.start);
        SegGrads { dw, db }
    }
}

fn split_backward(
    seg: &mut SegGrads,
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    dx: Option<&mut [f64]>,
) {
    matvec_backward(w, x, dy, rows, cols, seg.dw, seg.db, dx);
}

/// Loss applied to the TD error. Huber clips the gradient at `clip`
/// (standard DQN stabilization); `Squared` is the unclipped loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Huber { clip: f64 },
    Squared,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Huber { clip: 1.0 }
    }
}

impl LossKind {
    /// Loss value for one TD error (before importance weighting).
    pub fn loss(&self, td: f64) -> f64 {
        match self {
            LossKind::Squared => 0.5 * td * td,
            LossKind::Huber { clip } => {
                if td.abs() <= *clip {
                    0.5 * td * td
                } else {
                    clip * (td.abs() - 0.5 * clip)
                }
            }
        }
    }

    /// dLoss/dQ(s,a) for one TD error td = Q(s,a) - y.
    pub fn grad(&self, td: f64) -> f64 {
        match self {
            LossKind::Squared => td,
            LossKind::Huber { clip } => td.clamp(-clip, *clip),
        }
    }
}

impl QNet {
    /// Accumulates gradients of `is_weight * loss(td_error)` where only the
    /// taken action's Q-value contributes.
    pub fn backward_td(
        &self,
        cache: &ForwardCache,
        action: usize,
        td_error: f64,
        is_weight: f64,
        loss: LossKind,
        grads: &mut [f64],
    ) -> Result<()> {
        if action >= self.cfg.actions {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.actions,
                got: action,
            });
        }
        let mut dq = vec![0.0; self.cfg.actions];
        dq[action] = is_weight * loss.grad(td_error);
        self.backward(cache, &dq, grads)
    }
}

/// Greedy action with deterministic lower-index tie-breaking.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradients".into()));
        }
        self.t += 1;
        let c = &self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DRLQNET\0";
const CHECKPOINT_FORMAT: u32 = 1;

/// Saves a self-contained checkpoint: magic, format version, architecture,
/// the normalization statistics the net expects, and the parameters, all
/// little-endian.
pub fn save_checkpoint(path: &Path, net: &QNet, norm: &Normalizer) -> Result<()> {
    if norm.mean.len() != net.cfg.state_dim || norm.sd.len() != net.cfg.state_dim {
        return Err(Error::DimensionMismatch {
            expected: net.cfg.state_dim,
            got: norm.mean.len(),
        });
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_FORMAT.to_le_bytes())?;
    for dim in [net.cfg.state_dim, net.cfg.actions, net.cfg.hidden, net.cfg.stream_hidden] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&net.cfg.leaky_slope.to_le_bytes())?;
    for v in norm.mean.iter().chain(&norm.sd) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(net.params.len() as u64).to_le_bytes())?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(QNet, Normalizer)> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: &str| Error::format(path, msg);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut std::io::BufReader<std::fs::File>| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|_| Error::format(path, "truncated header"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let format = read_u32(&mut r)?;
    if format != CHECKPOINT_FORMAT {
        return Err(bad(&format!("unsupported checkpoint format {format}")));
    }
    let state_dim = read_u32(&mut r)? as usize;
    let actions = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let stream_hidden = read_u32(&mut r)? as usize;

    let mut f64buf = [0u8; 8];
    let mut read_f64 = |r: &mut std::io::BufReader<std::fs::File>| -> Result<f64> {
        r.read_exact(&mut f64buf).map_err(|_| Error::format(path, "truncated payload"))?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let leaky_slope = read_f64(&mut r)?;
    let cfg = NetConfig {
        state_dim,
        actions,
        hidden,
        stream_hidden,
        leaky_slope,
    };
    cfg.validate()?;

    let mut mean = Vec::with_capacity(state_dim);
    let mut sd = Vec::with_capacity(state_dim);
    for _ in 0..state_dim {
        mean.push(read_f64(&mut r)?);
    }
    for _ in 0..state_dim {
        sd.push(read_f64(&mut r)?);
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| bad("truncated parameter count"))?;
    let n_params = u64::from_le_bytes(u64buf) as usize;
    let expected = Layout::new(&cfg).total;
    if n_params != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: n_params,
        });
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_f64(&mut r)?);
    }
    if !params.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((QNet::from_params(cfg, params)?, Normalizer { mean, sd }))
}
