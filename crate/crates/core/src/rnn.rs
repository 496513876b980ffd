//! LSTM and GRU encoders that turn a variable-length sequence into a
//! fixed-length embedding, plus reverse-mode gradients of that embedding with
//! respect to every cell parameter.
//!
//! LSTM (no peepholes), per step with input `x` and previous `h`, `c`:
//!
//! ```text
//! z = tanh(W_z x + R_z h + b_z)     s = σ(W_s x + R_s h + b_s)
//! f = σ(W_f x + R_f h + b_f)        o = σ(W_o x + R_o h + b_o)
//! c' = s ⊙ z + f ⊙ c                h' = o ⊙ tanh(c')
//! ```
//!
//! GRU (bias-free):
//!
//! ```text
//! u = σ(W_u x + R_u h)              r = σ(W_r x + R_r h)
//! ĥ = tanh(W_c x + r ⊙ (R_c h))     h' = ĥ ⊙ u + h ⊙ (1 − u)
//! ```
//!
//! Both start from `h₀ = c₀ = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derive_seed;
use crate::stiefel::{block_orthogonality_error, init_orthogonal};

#[derive(Debug, Error, PartialEq)]
pub enum RnnError {
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sequence has no time steps")]
    EmptySequence,
    #[error("operation needs a {expected:?} cell, parameters are {found:?}")]
    WrongCell { expected: CellKind, found: CellKind },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, RnnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn block_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &["z", "s", "f", "o"],
            CellKind::Gru => &["update", "reset", "candidate"],
        }
    }

    pub fn has_bias(self) -> bool {
        matches!(self, CellKind::Lstm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Mean,
    Last,
    Max,
}

/// One gate's input matrix `w` (m×p), recurrent matrix `r` (m×m) and
/// optional bias `b` (m).
#[derive(Debug, Clone, PartialEq)]
pub struct GateBlock {
    pub w: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub b: Option<DVector<f64>>,
}

impl GateBlock {
    fn zeros(m: usize, p: usize, bias: bool) -> Self {
        Self {
            w: DMatrix::zeros(m, p),
            r: DMatrix::zeros(m, m),
            b: bias.then(|| DVector::zeros(m)),
        }
    }

    fn len(&self) -> usize {
        self.w.len() + self.r.len() + self.b.as_ref().map_or(0, |b| b.len())
    }

    fn entry(&self, idx: usize) -> f64 {
        let nw = self.w.len();
        let nr = self.r.len();
        if idx < nw {
            self.w.as_slice()[idx]
        } else if idx < nw + nr {
            self.r.as_slice()[idx - nw]
        } else {
            self.b.as_ref().expect("index within block")[idx - nw - nr]
        }
    }

    fn entry_mut(&mut self, idx: usize) -> &mut f64 {
        let nw = self.w.len();
        let nr = self.r.len();
        if idx < nw {
            &mut self.w.as_mut_slice()[idx]
        } else if idx < nw + nr {
            &mut self.r.as_mut_slice()[idx - nw]
        } else {
            &mut self.b.as_mut().expect("index within block")[idx - nw - nr]
        }
    }
}

/// Cell parameters θ: four blocks `(z, s, f, o)` for an LSTM, three blocks
/// `(update, reset, candidate)` for a GRU.
///
/// Entries are addressable through a flat index (block by block; within a
/// block `w`, then `r`, then `b`, each column-major), which is what
/// finite-difference checks iterate over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsDoc", try_from = "ParamsDoc")]
pub struct RnnParams {
    kind: CellKind,
    m: usize,
    p: usize,
    blocks: Vec<GateBlock>,
}

impl RnnParams {
    pub fn zeros(kind: CellKind, m: usize, p: usize) -> Self {
        let blocks = kind
            .block_names()
            .iter()
            .map(|_| GateBlock::zeros(m, p, kind.has_bias()))
            .collect();
        Self { kind, m, p, blocks }
    }

    pub fn from_blocks(kind: CellKind, blocks: Vec<GateBlock>) -> Result<Self> {
        let expected = kind.block_names().len();
        if blocks.len() != expected {
            return Err(RnnError::InvalidParams(format!(
                "{kind:?} needs {expected} blocks, got {}",
                blocks.len()
            )));
        }
        let m = blocks[0].r.nrows();
        let p = blocks[0].w.ncols();
        if m == 0 || p == 0 {
            return Err(RnnError::InvalidParams("m and p must be positive".into()));
        }
        for blk in &blocks {
            if blk.w.shape() != (m, p) || blk.r.shape() != (m, m) {
                return Err(RnnError::InvalidParams(
                    "all blocks must share m and p".into(),
                ));
            }
            match (&blk.b, kind.has_bias()) {
                (Some(b), true) if b.len() == m => {}
                (None, false) => {}
                _ => {
                    return Err(RnnError::InvalidParams(format!(
                        "bias layout does not match {kind:?}"
                    )))
                }
            }
        }
        Ok(Self { kind, m, p, blocks })
    }

    /// Orthogonal initialization: every `W` and `R` has orthonormal columns
    /// (rows, for wide `W`) and every bias is a unit vector.
    pub fn init_orthogonal(kind: CellKind, m: usize, p: usize, seed: u64) -> Self {
        assert!(m > 0 && p > 0, "m and p must be positive");
        let blocks = kind
            .block_names()
            .iter()
            .map(|name| {
                let s = |part: &str| derive_seed(seed, &format!("{name}.{part}"));
                let w = if m >= p {
                    init_orthogonal(m, p, s("w")).expect("m >= p").into_value()
                } else {
                    init_orthogonal(p, m, s("w")).expect("p > m").into_value().transpose()
                };
                let r = init_orthogonal(m, m, s("r")).expect("square").into_value();
                let b = kind.has_bias().then(|| {
                    let v = init_orthogonal(m, 1, s("b")).expect("column").into_value();
                    DVector::from_column_slice(v.as_slice())
                });
                GateBlock { w, r, b }
            })
            .collect();
        Self { kind, m, p, blocks }
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    /// Embedding width.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Input width.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn blocks(&self) -> &[GateBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [GateBlock] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(GateBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, idx: usize) -> f64 {
        let (b, i) = self.locate(idx);
        self.blocks[b].entry(i)
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut f64 {
        let (b, i) = self.locate(idx);
        self.blocks[b].entry_mut(i)
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (b, blk) in self.blocks.iter().enumerate() {
            let n = blk.len();
            if idx < n {
                return (b, idx);
            }
            idx -= n;
        }
        panic!("parameter index out of range");
    }

    /// Largest violation of the orthogonality / unit-norm constraints over
    /// all blocks.
    pub fn constraint_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|blk| {
                let mut e = block_orthogonality_error(&blk.w).max(block_orthogonality_error(&blk.r));
                if let Some(b) = &blk.b {
                    e = e.max((b.norm_squared() - 1.0).abs());
                }
                e
            })
            .fold(0.0, f64::max)
    }

    fn check_cell(&self, expected: CellKind) -> Result<()> {
        if self.kind != expected {
            return Err(RnnError::WrongCell {
                expected,
                found: self.kind,
            });
        }
        Ok(())
    }
}

/// Gradient of a scalar with respect to every block of an [`RnnParams`],
/// laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnGradient {
    pub blocks: Vec<GateBlock>,
}

impl RnnGradient {
    pub fn zeros_like(params: &RnnParams) -> Self {
        Self {
            blocks: params
                .blocks
                .iter()
                .map(|b| GateBlock::zeros(params.m, params.p, b.b.is_some()))
                .collect(),
        }
    }

    pub fn entry(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for blk in &self.blocks {
            let n = blk.len();
            if idx < n {
                return blk.entry(idx);
            }
            idx -= n;
        }
        panic!("gradient index out of range");
    }

    pub fn add_assign(&mut self, other: &RnnGradient) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.w += &b.w;
            a.r += &b.r;
            if let (Some(x), Some(y)) = (a.b.as_mut(), b.b.as_ref()) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.w.iter().all(|&v| v == 0.0)
                && b.r.iter().all(|&v| v == 0.0)
                && b.b.as_ref().is_none_or(|v| v.iter().all(|&x| x == 0.0))
        })
    }
}

/// Pooled sequence representation. `c_bar` is set for LSTM cells only.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub h_bar: DVector<f64>,
    pub c_bar: Option<DVector<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(blk: &GateBlock, x: &DVector<f64>, h: &DVector<f64>) -> DVector<f64> {
    let mut a = &blk.w * x + &blk.r * h;
    if let Some(b) = &blk.b {
        a += b;
    }
    a
}

fn check_step_dims(params: &RnnParams, x: &DVector<f64>, h: &DVector<f64>) -> Result<()> {
    if x.len() != params.p {
        return Err(RnnError::DimensionMismatch {
            what: "input",
            expected: params.p,
            found: x.len(),
        });
    }
    if h.len() != params.m {
        return Err(RnnError::DimensionMismatch {
            what: "hidden state",
            expected: params.m,
            found: h.len(),
        });
    }
    Ok(())
}

struct LstmCache {
    h_prev: DVector<f64>,
    c_prev: DVector<f64>,
    z: DVector<f64>,
    s: DVector<f64>,
    f: DVector<f64>,
    o: DVector<f64>,
    tanh_c: DVector<f64>,
}

struct GruCache {
    h_prev: DVector<f64>,
    u: DVector<f64>,
    r: DVector<f64>,
    q: DVector<f64>,
    cand: DVector<f64>,
}

fn lstm_forward(
    params: &RnnParams,
    x: &DVector<f64>,
    h_prev: &DVector<f64>,
    c_prev: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, LstmCache) {
    let [bz, bs, bf, bo] = &params.blocks[..] else {
        unreachable!("LSTM has four blocks")
    };
    let z = affine(bz, x, h_prev).map(f64::tanh);
    let s = affine(bs, x, h_prev).map(sigmoid);
    let f = affine(bf, x, h_prev).map(sigmoid);
    let o = affine(bo, x, h_prev).map(sigmoid);
    let c = s.component_mul(&z) + f.component_mul(c_prev);
    let tanh_c = c.map(f64::tanh);
    let h = o.component_mul(&tanh_c);
    let cache = LstmCache {
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        z,
        s,
        f,
        o,
        tanh_c,
    };
    (h, c, cache)
}

fn gru_forward(params: &RnnParams, x: &DVector<f64>, h_prev: &DVector<f64>) -> (DVector<f64>, GruCache) {
    let [bu, br, bc] = &params.blocks[..] else {
        unreachable!("GRU has three blocks")
    };
    let u = affine(bu, x, h_prev).map(sigmoid);
    let r = affine(br, x, h_prev).map(sigmoid);
    let q = &bc.r * h_prev;
    let cand = (&bc.w * x + r.component_mul(&q)).map(f64::tanh);
    let h = cand.component_mul(&u) + h_prev.component_mul(&u.map(|v| 1.0 - v));
    let cache = GruCache {
        h_prev: h_prev.clone(),
        u,
        r,
        q,
        cand,
    };
    (h, cache)
}

pub fn lstm_step(
    x: &DVector<f64>,
    h_prev: &DVector<f64>,
    c_prev: &DVector<f64>,
    params: &RnnParams,
) -> Result<(DVector<f64>, DVector<f64>)> {
    params.check_cell(CellKind::Lstm)?;
    check_step_dims(params, x, h_prev)?;
    if c_prev.len() != params.m {
        return Err(RnnError::DimensionMismatch {
            what: "cell state",
            expected: params.m,
            found: c_prev.len(),
        });
    }
    let (h, c, _) = lstm_forward(params, x, h_prev, c_prev);
    Ok((h, c))
}

pub fn gru_step(x: &DVector<f64>, h_prev: &DVector<f64>, params: &RnnParams) -> Result<DVector<f64>> {
    params.check_cell(CellKind::Gru)?;
    check_step_dims(params, x, h_prev)?;
    Ok(gru_forward(params, x, h_prev).0)
}

enum Caches {
    Lstm(Vec<LstmCache>),
    Gru(Vec<GruCache>),
}

/// Forward pass over one sequence with everything the backward pass needs.
pub struct ForwardTrace {
    inputs: DMatrix<f64>,
    hs: Vec<DVector<f64>>,
    caches: Caches,
    pooling: PoolingMode,
    embedding: Embedding,
}

fn pool(states: &[DVector<f64>], pooling: PoolingMode) -> DVector<f64> {
    match pooling {
        PoolingMode::Mean => {
            let mut acc = DVector::zeros(states[0].len());
            for h in states {
                acc += h;
            }
            acc / states.len() as f64
        }
        PoolingMode::Last => states[states.len() - 1].clone(),
        PoolingMode::Max => DVector::from_fn(states[0].len(), |k, _| {
            states.iter().map(|h| h[k]).fold(f64::NEG_INFINITY, f64::max)
        }),
    }
}

/// Time index of the maximum per coordinate; ties go to the earliest step.
fn argmax_steps(states: &[DVector<f64>]) -> Vec<usize> {
    (0..states[0].len())
        .map(|k| {
            let mut best = 0;
            for (j, h) in states.iter().enumerate().skip(1) {
                if h[k] > states[best][k] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn forward(x: &DMatrix<f64>, params: &RnnParams, pooling: PoolingMode) -> Result<ForwardTrace> {
    if x.nrows() != params.p {
        return Err(RnnError::DimensionMismatch {
            what: "input",
            expected: params.p,
            found: x.nrows(),
        });
    }
    let d = x.ncols();
    if d == 0 {
        return Err(RnnError::EmptySequence);
    }
    let m = params.m;
    let mut hs = Vec::with_capacity(d);
    let mut h = DVector::zeros(m);
    let (caches, c_bar) = match params.kind {
        CellKind::Lstm => {
            let mut c = DVector::zeros(m);
            let mut caches = Vec::with_capacity(d);
            let mut cs = Vec::with_capacity(d);
            for col in x.column_iter() {
                let xt = col.clone_owned();
                let (h_new, c_new, cache) = lstm_forward(params, &xt, &h, &c);
                caches.push(cache);
                hs.push(h_new.clone());
                cs.push(c_new.clone());
                h = h_new;
                c = c_new;
            }
            (Caches::Lstm(caches), Some(pool(&cs, pooling)))
        }
        CellKind::Gru => {
            let mut caches = Vec::with_capacity(d);
            for col in x.column_iter() {
                let xt = col.clone_owned();
                let (h_new, cache) = gru_forward(params, &xt, &h);
                caches.push(cache);
                hs.push(h_new.clone());
                h = h_new;
            }
            (Caches::Gru(caches), None)
        }
    };
    let embedding = Embedding {
        h_bar: pool(&hs, pooling),
        c_bar,
    };
    Ok(ForwardTrace {
        inputs: x.clone(),
        hs,
        caches,
        pooling,
        embedding,
    })
}

fn accumulate(blk: &mut GateBlock, da: &DVector<f64>, x: &DVector<f64>, h_prev: &DVector<f64>) {
    blk.w.ger(1.0, da, x, 1.0);
    blk.r.ger(1.0, da, h_prev, 1.0);
    if let Some(b) = blk.b.as_mut() {
        *b += da;
    }
}

impl ForwardTrace {
    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn len(&self) -> usize {
        self.hs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hs.is_empty()
    }

    /// Adds the gradient of `⟨upstream, h̄⟩` with respect to θ into `grad`.
    pub fn backward_into(&self, params: &RnnParams, upstream: &DVector<f64>, grad: &mut RnnGradient) {
        let d = self.hs.len();
        let m = params.m;
        // gradient flowing into each h_t from the pooling layer
        let mut pooled: Vec<DVector<f64>> = vec![DVector::zeros(m); d];
        match self.pooling {
            PoolingMode::Mean => {
                let share = upstream / d as f64;
                for g in pooled.iter_mut() {
                    g.copy_from(&share);
                }
            }
            PoolingMode::Last => pooled[d - 1].copy_from(upstream),
            PoolingMode::Max => {
                for (k, j) in argmax_steps(&self.hs).into_iter().enumerate() {
                    pooled[j][k] += upstream[k];
                }
            }
        }

        let mut dh_next = DVector::zeros(m);
        match &self.caches {
            Caches::Lstm(caches) => {
                let mut dc_next = DVector::zeros(m);
                for t in (0..d).rev() {
                    let cc = &caches[t];
                    let xt = self.inputs.column(t).clone_owned();
                    let dh = &pooled[t] + &dh_next;
                    let d_o = dh.component_mul(&cc.tanh_c);
                    let dc = dc_next
                        + dh.component_mul(&cc.o)
                            .component_mul(&cc.tanh_c.map(|v| 1.0 - v * v));
                    let ds = dc.component_mul(&cc.z);
                    let dz = dc.component_mul(&cc.s);
                    let df = dc.component_mul(&cc.c_prev);
                    dc_next = dc.component_mul(&cc.f);

                    let da_z = dz.component_mul(&cc.z.map(|v| 1.0 - v * v));
                    let da_s = ds.component_mul(&cc.s.map(|v| v * (1.0 - v)));
                    let da_f = df.component_mul(&cc.f.map(|v| v * (1.0 - v)));
                    let da_o = d_o.component_mul(&cc.o.map(|v| v * (1.0 - v)));

                    let mut dh_prev = DVector::zeros(m);
                    for (i, da) in [da_z, da_s, da_f, da_o].iter().enumerate() {
                        accumulate(&mut grad.blocks[i], da, &xt, &cc.h_prev);
                        dh_prev.gemv_tr(1.0, &params.blocks[i].r, da, 1.0);
                    }
                    dh_next = dh_prev;
                }
            }
            Caches::Gru(caches) => {
                for t in (0..d).rev() {
                    let cc = &caches[t];
                    let xt = self.inputs.column(t).clone_owned();
                    let dh = &pooled[t] + &dh_next;
                    let dcand = dh.component_mul(&cc.u);
                    let du = dh.component_mul(&(&cc.cand - &cc.h_prev));
                    let mut dh_prev = dh.component_mul(&cc.u.map(|v| 1.0 - v));

                    let da_c = dcand.component_mul(&cc.cand.map(|v| 1.0 - v * v));
                    let dr = da_c.component_mul(&cc.q);
                    let dq = da_c.component_mul(&cc.r);
                    let da_u = du.component_mul(&cc.u.map(|v| v * (1.0 - v)));
                    let da_r = dr.component_mul(&cc.r.map(|v| v * (1.0 - v)));

                    accumulate(&mut grad.blocks[0], &da_u, &xt, &cc.h_prev);
                    accumulate(&mut grad.blocks[1], &da_r, &xt, &cc.h_prev);
                    let cand_blk = &mut grad.blocks[2];
                    cand_blk.w.ger(1.0, &da_c, &xt, 1.0);
                    cand_blk.r.ger(1.0, &dq, &cc.h_prev, 1.0);

                    dh_prev.gemv_tr(1.0, &params.blocks[0].r, &da_u, 1.0);
                    dh_prev.gemv_tr(1.0, &params.blocks[1].r, &da_r, 1.0);
                    dh_prev.gemv_tr(1.0, &params.blocks[2].r, &dq, 1.0);
                    dh_next = dh_prev;
                }
            }
        }
    }

    pub fn backward(&self, params: &RnnParams, upstream: &DVector<f64>) -> RnnGradient {
        let mut grad = RnnGradient::zeros_like(params);
        self.backward_into(params, upstream, &mut grad);
        grad
    }
}

pub fn embed_sequence(x: &DMatrix<f64>, params: &RnnParams, pooling: PoolingMode) -> Result<Embedding> {
    Ok(forward(x, params, pooling)?.embedding)
}

/// Gradient of `⟨upstream, h̄⟩` with respect to every parameter block,
/// accumulated over the full unrolled recursion.
pub fn embed_gradients(
    x: &DMatrix<f64>,
    params: &RnnParams,
    pooling: PoolingMode,
    upstream: &DVector<f64>,
) -> Result<RnnGradient> {
    if upstream.len() != params.m {
        return Err(RnnError::DimensionMismatch {
            what: "upstream",
            expected: params.m,
            found: upstream.len(),
        });
    }
    Ok(forward(x, params, pooling)?.backward(params, upstream))
}

const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BlockDoc {
    name: String,
    w: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    version: u32,
    cell: CellKind,
    m: usize,
    p: usize,
    blocks: Vec<BlockDoc>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> std::result::Result<DMatrix<f64>, String> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{what} must be {nrows}x{ncols}"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<RnnParams> for ParamsDoc {
    fn from(p: RnnParams) -> Self {
        let names = p.kind.block_names();
        ParamsDoc {
            version: PARAMS_VERSION,
            cell: p.kind,
            m: p.m,
            p: p.p,
            blocks: p
                .blocks
                .iter()
                .zip(names)
                .map(|(b, name)| BlockDoc {
                    name: (*name).to_string(),
                    w: rows(&b.w),
                    r: rows(&b.r),
                    b: b.b.as_ref().map(|v| v.iter().copied().collect()),
                })
                .collect(),
        }
    }
}

impl TryFrom<ParamsDoc> for RnnParams {
    type Error = String;

    fn try_from(doc: ParamsDoc) -> std::result::Result<Self, Self::Error> {
        if doc.version != PARAMS_VERSION {
            return Err(format!("unsupported parameter document version {}", doc.version));
        }
        let names = doc.cell.block_names();
        if doc.blocks.len() != names.len() {
            return Err(format!("{:?} needs {} blocks", doc.cell, names.len()));
        }
        let mut blocks = Vec::with_capacity(names.len());
        for (blk, name) in doc.blocks.iter().zip(names) {
            if blk.name != *name {
                return Err(format!("expected block {name:?}, found {:?}", blk.name));
            }
            blocks.push(GateBlock {
                w: from_rows(&blk.w, doc.m, doc.p, "w")?,
                r: from_rows(&blk.r, doc.m, doc.m, "r")?,
                b: blk.b.as_ref().map(|v| DVector::from_column_slice(v)),
            });
        }
        RnnParams::from_blocks(doc.cell, blocks).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_lstm(weight: f64, bias: f64) -> RnnParams {
        let blk = GateBlock {
            w: DMatrix::from_element(1, 1, weight),
            r: DMatrix::from_element(1, 1, weight),
            b: Some(DVector::from_element(1, bias)),
        };
        RnnParams::from_blocks(CellKind::Lstm, vec![blk; 4]).unwrap()
    }

    fn scalar_gru(weight: f64) -> RnnParams {
        let blk = GateBlock {
            w: DMatrix::from_element(1, 1, weight),
            r: DMatrix::from_element(1, 1, weight),
            b: None,
        };
        RnnParams::from_blocks(CellKind::Gru, vec![blk; 3]).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn lstm_zero_params_fixed_point() {
        let p = RnnParams::zeros(CellKind::Lstm, 3, 2);
        let (h, c) = lstm_step(&v(&[0.7, -2.0]), &DVector::zeros(3), &DVector::zeros(3), &p).unwrap();
        assert_eq!(h, DVector::zeros(3));
        assert_eq!(c, DVector::zeros(3));
    }

    #[test]
    fn lstm_scalar_hand_evaluation() {
        // x = 0, h = 0, c_prev = 1: z = 0, gates = 1/2, c = 0.5, h = 0.5 tanh(0.5)
        let p = scalar_lstm(1.0, 0.0);
        let (h, c) = lstm_step(&v(&[0.0]), &v(&[0.0]), &v(&[1.0]), &p).unwrap();
        assert_relative_eq!(c[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(h[0], 0.5 * 0.5f64.tanh(), epsilon = 1e-15);
        assert_relative_eq!(h[0], 0.231, epsilon = 5e-4);
    }

    #[test]
    fn lstm_output_is_bounded() {
        let p = RnnParams::init_orthogonal(CellKind::Lstm, 4, 3, 1);
        let (h, _) = lstm_step(
            &v(&[50.0, -80.0, 3.0]),
            &v(&[0.9, -0.9, 0.1, 0.0]),
            &v(&[10.0, -10.0, 0.0, 1.0]),
            &p,
        )
        .unwrap();
        assert!(h.iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let p = RnnParams::zeros(CellKind::Gru, 2, 2);
        let h = gru_step(&v(&[1.0, 1.0]), &v(&[0.4, -0.8]), &p).unwrap();
        assert_relative_eq!(h, v(&[0.2, -0.4]), epsilon = 1e-15);
        let h = gru_step(&v(&[1.0, 1.0]), &DVector::zeros(2), &p).unwrap();
        assert_eq!(h, DVector::zeros(2));
    }

    #[test]
    fn gru_scalar_hand_evaluation() {
        let p = scalar_gru(1.0);
        let h = gru_step(&v(&[1.0]), &v(&[0.0]), &p).unwrap();
        let u = 1.0 / (1.0 + (-1.0f64).exp());
        assert_relative_eq!(h[0], 1.0f64.tanh() * u, epsilon = 1e-15);
        assert_relative_eq!(h[0], 0.557, epsilon = 5e-4);
    }

    #[test]
    fn step_checks_cell_and_dims() {
        let gru = RnnParams::zeros(CellKind::Gru, 2, 2);
        assert!(matches!(
            lstm_step(&v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &gru),
            Err(RnnError::WrongCell { .. })
        ));
        assert!(matches!(
            gru_step(&v(&[0.0]), &v(&[0.0, 0.0]), &gru),
            Err(RnnError::DimensionMismatch { what: "input", .. })
        ));
    }

    #[test]
    fn single_step_pooling_modes_agree() {
        let p = RnnParams::init_orthogonal(CellKind::Lstm, 3, 2, 4);
        let x = DMatrix::from_column_slice(2, 1, &[0.3, -0.7]);
        let mean = embed_sequence(&x, &p, PoolingMode::Mean).unwrap();
        let last = embed_sequence(&x, &p, PoolingMode::Last).unwrap();
        let max = embed_sequence(&x, &p, PoolingMode::Max).unwrap();
        assert_eq!(mean, last);
        assert_eq!(mean, max);
    }

    #[test]
    fn zero_params_embed_to_zero() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let p = RnnParams::zeros(kind, 3, 2);
            let x = DMatrix::from_fn(2, 5, |i, j| (i + j) as f64 - 2.0);
            let e = embed_sequence(&x, &p, PoolingMode::Mean).unwrap();
            assert_eq!(e.h_bar, DVector::zeros(3));
        }
    }

    #[test]
    fn unrolled_scalar_lstm() {
        // X = [0, 0] with the scalar parameters above: step 1 from h=c=0 gives
        // z = 0, c1 = 0, h1 = 0; step 2 repeats the same fixed point.
        let p = scalar_lstm(1.0, 0.0);
        let x = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let e = embed_sequence(&x, &p, PoolingMode::Mean).unwrap();
        assert_eq!(e.h_bar[0], 0.0);
        assert_eq!(e.c_bar.unwrap()[0], 0.0);

        // X = [1, 0] unrolled by hand
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let c1 = sig(1.0) * 1.0f64.tanh();
        let h1 = sig(1.0) * c1.tanh();
        let c2 = sig(h1) * h1.tanh() + sig(h1) * c1;
        let h2 = sig(h1) * c2.tanh();
        let e = embed_sequence(&x, &p, PoolingMode::Mean).unwrap();
        assert_relative_eq!(e.h_bar[0], 0.5 * (h1 + h2), epsilon = 1e-15);
        assert_relative_eq!(e.c_bar.unwrap()[0], 0.5 * (c1 + c2), epsilon = 1e-15);
        let last = embed_sequence(&x, &p, PoolingMode::Last).unwrap();
        assert_relative_eq!(last.h_bar[0], h2, epsilon = 1e-15);
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = RnnParams::zeros(CellKind::Lstm, 2, 2);
        assert_eq!(
            embed_sequence(&DMatrix::zeros(2, 0), &p, PoolingMode::Mean).unwrap_err(),
            RnnError::EmptySequence
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = RnnParams::init_orthogonal(CellKind::Gru, 3, 2, 1);
        let x = DMatrix::from_fn(2, 4, |i, j| 0.1 * (i as f64) - 0.2 * (j as f64));
        let g = embed_gradients(&x, &p, PoolingMode::Mean, &DVector::zeros(3)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn padding_changes_mean_embedding() {
        let p = RnnParams::init_orthogonal(CellKind::Lstm, 3, 2, 2);
        let x = DMatrix::from_row_slice(2, 2, &[0.5, -0.3, 0.2, 0.9]);
        let padded = x.clone().resize_horizontally(4, 0.0);
        let a = embed_sequence(&x, &p, PoolingMode::Mean).unwrap();
        let b = embed_sequence(&padded, &p, PoolingMode::Mean).unwrap();
        assert_ne!(a.h_bar, b.h_bar);
    }

    #[test]
    fn params_json_is_versioned_and_row_major() {
        let p = RnnParams::init_orthogonal(CellKind::Lstm, 2, 3, 5);
        let doc: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(doc["version"], 1);
        assert_eq!(doc["cell"], "lstm");
        assert_eq!(doc["blocks"][0]["name"], "z");
        assert_eq!(doc["blocks"][0]["w"].as_array().unwrap().len(), 2);
        assert_eq!(doc["blocks"][0]["w"][1][2], p.blocks()[0].w[(1, 2)]);
        let back: RnnParams = serde_json::from_value(doc).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn init_satisfies_constraints() {
        for (m, p) in [(3, 2), (2, 5), (4, 4)] {
            let params = RnnParams::init_orthogonal(CellKind::Lstm, m, p, 3);
            assert!(params.constraint_error() < 1e-12);
            assert_eq!(params.len(), 4 * m * (m + p + 1));
        }
        let gru = RnnParams::init_orthogonal(CellKind::Gru, 3, 2, 3);
        assert_eq!(gru.len(), 3 * 3 * (3 + 2));
    }
}
