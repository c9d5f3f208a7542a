//! Small conditional noise-prediction network with hand-written backprop.
//!
//! Layout: sinusoidal time embedding → input projection → residual MLP
//! blocks → one self-attention block over `tokens` slices of the hidden state
//! (with the identity-map perturbation hook) → one cross-attention block
//! fusing a single text token with the visual tokens → residual MLP blocks →
//! output projection.
//!
//! All parameters live in one flat buffer so optimizers and serialization can
//! treat them uniformly.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the single self-attention block, for PAG block selection.
pub const SELF_ATTENTION_BLOCK: &str = "sa0";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyNetConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Number of self-attention tokens the hidden state is split into.
    pub tokens: usize,
    pub time_features: usize,
    /// Prompt vocabulary size; index `vocab` is the null prompt.
    pub vocab: usize,
    pub visual_tokens: usize,
    pub visual_width: usize,
    pub pre_blocks: usize,
    pub post_blocks: usize,
}

impl ToyNetConfig {
    pub fn token_dim(&self) -> usize {
        self.hidden / self.tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || !self.hidden.is_multiple_of(self.tokens) {
            return Err(Error::InvalidArgument(format!(
                "hidden width {} must split evenly into {} tokens",
                self.hidden, self.tokens
            )));
        }
        if !self.time_features.is_multiple_of(2) || self.time_features == 0 {
            return Err(Error::InvalidArgument("time_features must be a positive even number".into()));
        }
        if self.input_dim == 0 || self.visual_tokens == 0 || self.visual_width == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    wa: Slot,
    ba: Slot,
    wb: Slot,
    bb: Slot,
}

#[derive(Debug, Clone)]
struct Slots {
    time_w: Slot,
    time_b: Slot,
    in_w: Slot,
    in_b: Slot,
    pre: Vec<BlockSlots>,
    sa_q: Slot,
    sa_k: Slot,
    sa_v: Slot,
    sa_o: Slot,
    ca_q: Slot,
    txt_emb: Slot,
    ca_vt: Slot,
    ca_kv: Slot,
    ca_vv: Slot,
    ca_o: Slot,
    post: Vec<BlockSlots>,
    out_w: Slot,
    out_b: Slot,
    total: usize,
}

struct SlotBuilder {
    next: usize,
    /// (slot, fan-in used for init; 0 means zero-init, usize::MAX means unit normal)
    init: Vec<(Slot, usize)>,
}

impl SlotBuilder {
    fn take(&mut self, rows: usize, cols: usize, fan_in: usize) -> Slot {
        let slot = Slot {
            offset: self.next,
            rows,
            cols,
        };
        self.next += slot.len();
        self.init.push((slot, fan_in));
        slot
    }

    fn block(&mut self, h: usize) -> BlockSlots {
        BlockSlots {
            wa: self.take(h, h, h),
            ba: self.take(1, h, 0),
            wb: self.take(h, h, h),
            bb: self.take(1, h, 0),
        }
    }
}

fn build_slots(cfg: &ToyNetConfig) -> (Slots, Vec<(Slot, usize)>) {
    let (h, d) = (cfg.hidden, cfg.token_dim());
    let mut b = SlotBuilder {
        next: 0,
        init: Vec::new(),
    };
    let time_w = b.take(cfg.time_features, h, cfg.time_features);
    let time_b = b.take(1, h, 0);
    let in_w = b.take(cfg.input_dim, h, cfg.input_dim);
    let in_b = b.take(1, h, 0);
    let pre = (0..cfg.pre_blocks).map(|_| b.block(h)).collect();
    let sa_q = b.take(d, d, d);
    let sa_k = b.take(d, d, d);
    let sa_v = b.take(d, d, d);
    let sa_o = b.take(d, d, d);
    let ca_q = b.take(d, d, d);
    let txt_emb = b.take(cfg.vocab + 1, d, usize::MAX);
    let ca_vt = b.take(d, d, d);
    let ca_kv = b.take(cfg.visual_width, d, cfg.visual_width);
    let ca_vv = b.take(cfg.visual_width, d, cfg.visual_width);
    let ca_o = b.take(d, d, d);
    let post = (0..cfg.post_blocks).map(|_| b.block(h)).collect();
    let out_w = b.take(h, cfg.input_dim, h);
    let out_b = b.take(1, cfg.input_dim, 0);
    let slots = Slots {
        time_w,
        time_b,
        in_w,
        in_b,
        pre,
        sa_q,
        sa_k,
        sa_v,
        sa_o,
        ca_q,
        txt_emb,
        ca_vt,
        ca_kv,
        ca_vv,
        ca_o,
        post,
        out_w,
        out_b,
        total: b.next,
    };
    (slots, b.init)
}

fn view(buf: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &buf[s.offset..s.offset + s.len()]).expect("slot shape")
}

fn view_mut(buf: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut buf[s.offset..s.offset + s.len()]).expect("slot shape")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features of raw timesteps.
pub fn time_features(t: &[f64], n: usize) -> Array2<f64> {
    let half = n / 2;
    let mut out = Array2::zeros((t.len(), n));
    for (i, &ti) in t.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out[[i, k]] = (ti * freq).sin();
            out[[i, half + k]] = (ti * freq).cos();
        }
    }
    out
}

/// One batch of network inputs.
pub struct BatchInput<'a> {
    /// B × input_dim
    pub x: ArrayView2<'a, f64>,
    pub t: &'a [f64],
    /// Prompt index per sample; `vocab` is the null prompt.
    pub labels: &'a [usize],
    /// (B · visual_tokens) × visual_width, zero rows for the null condition.
    pub visual: Option<ArrayView2<'a, f64>>,
    /// Fusion scale τ per sample.
    pub tau: &'a [f64],
    pub perturb: bool,
}

struct BlockCache {
    input: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

struct AttnCache {
    tokens: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-major per-sample attention maps.
    a: Vec<f64>,
    out: Array2<f64>,
}

struct CrossCache {
    tokens: Array2<f64>,
    q: Array2<f64>,
    text_emb: Array2<f64>,
    kv: Option<Array2<f64>>,
    vv: Option<Array2<f64>>,
    a: Vec<f64>,
    fused: Array2<f64>,
}

pub struct ForwardCache {
    batch: usize,
    perturb: bool,
    labels: Vec<usize>,
    tau: Vec<f64>,
    visual: Option<Array2<f64>>,
    time_feat: Array2<f64>,
    time_pre: Array2<f64>,
    x: Array2<f64>,
    pre: Vec<BlockCache>,
    sa: AttnCache,
    cross: CrossCache,
    post: Vec<BlockCache>,
    last_hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyNet {
    cfg: ToyNetConfig,
    slots: Slots,
    params: Vec<f64>,
}

impl PartialEq for ToyNet {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

impl ToyNet {
    pub fn new<R: Rng + ?Sized>(cfg: ToyNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (slots, init) = build_slots(&cfg);
        let mut params = vec![0.0; slots.total];
        for (slot, fan_in) in init {
            if fan_in == 0 {
                continue;
            }
            let scale = if fan_in == usize::MAX {
                1.0
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            for p in &mut params[slot.offset..slot.offset + slot.len()] {
                *p = rng.sample::<f64, _>(StandardNormal) * scale;
            }
        }
        // Start the residual branches and output near zero.
        for blk in slots.pre.iter().chain(slots.post.iter()) {
            view_mut(&mut params, blk.wb).mapv_inplace(|v| v * 0.1);
        }
        view_mut(&mut params, slots.sa_o).mapv_inplace(|v| v * 0.1);
        view_mut(&mut params, slots.ca_o).mapv_inplace(|v| v * 0.1);
        view_mut(&mut params, slots.out_w).mapv_inplace(|v| v * 0.1);
        Ok(Self { cfg, slots, params })
    }

    pub fn from_params(cfg: ToyNetConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let (slots, _) = build_slots(&cfg);
        if params.len() != slots.total {
            return Err(Error::WeightsFormat(format!(
                "expected {} parameters, found {}",
                slots.total,
                params.len()
            )));
        }
        Ok(Self { cfg, slots, params })
    }

    pub fn config(&self) -> &ToyNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_batch(&self, input: &BatchInput<'_>) -> Result<usize> {
        let b = input.x.nrows();
        if input.x.ncols() != self.cfg.input_dim {
            return Err(Error::shape("toy net input width", &[self.cfg.input_dim], &[input.x.ncols()]));
        }
        if input.t.len() != b || input.labels.len() != b || input.tau.len() != b {
            return Err(Error::InvalidArgument("batch metadata length mismatch".into()));
        }
        if let Some(&bad) = input.labels.iter().find(|&&l| l > self.cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "prompt index {bad} outside vocabulary of {}",
                self.cfg.vocab
            )));
        }
        if let Some(v) = &input.visual {
            let expected = [b * self.cfg.visual_tokens, self.cfg.visual_width];
            if v.dim() != (expected[0], expected[1]) {
                return Err(Error::shape("toy net visual tokens", &expected, &[v.nrows(), v.ncols()]));
            }
        }
        Ok(b)
    }

    /// Forward pass without keeping activations.
    pub fn forward(&self, input: &BatchInput<'_>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &BatchInput<'_>) -> Result<(Array2<f64>, ForwardCache)> {
        let b = self.check_batch(input)?;
        let p = &self.params;
        let sl = &self.slots;
        let (h, n, d) = (self.cfg.hidden, self.cfg.tokens, self.cfg.token_dim());

        let time_feat = time_features(input.t, self.cfg.time_features);
        let time_pre = time_feat.dot(&view(p, sl.time_w)) + view(p, sl.time_b);
        let temb = time_pre.mapv(silu);

        let x = input.x.to_owned();
        let mut hid = x.dot(&view(p, sl.in_w)) + view(p, sl.in_b) + &temb;

        let mut pre = Vec::with_capacity(sl.pre.len());
        for blk in &sl.pre {
            let (next, cache) = block_forward(p, blk, hid);
            pre.push(cache);
            hid = next;
        }

        // Self-attention over `n` tokens of width `d`.
        let tokens = hid
            .clone()
            .into_shape_with_order((b * n, d))
            .expect("hidden splits into tokens");
        let q = tokens.dot(&view(p, sl.sa_q));
        let k = tokens.dot(&view(p, sl.sa_k));
        let v = tokens.dot(&view(p, sl.sa_v));
        let (attn_out, a) = if input.perturb {
            (v.clone(), Vec::new())
        } else {
            attend(&q, &k, &v, b, n, n)
        };
        let proj = attn_out.dot(&view(p, sl.sa_o));
        hid = hid + proj.into_shape_with_order((b, h)).expect("tokens merge");
        let sa = AttnCache {
            tokens,
            q,
            k,
            v,
            a,
            out: attn_out,
        };

        // Cross-attention: one text token (softmax over a single key is 1)
        // plus τ-scaled attention over the visual tokens.
        let tokens = hid
            .clone()
            .into_shape_with_order((b * n, d))
            .expect("hidden splits into tokens");
        let cq = tokens.dot(&view(p, sl.ca_q));
        let emb = view(p, sl.txt_emb);
        let mut text_emb = Array2::zeros((b, d));
        for (i, &l) in input.labels.iter().enumerate() {
            text_emb.row_mut(i).assign(&emb.row(l));
        }
        let vt = text_emb.dot(&view(p, sl.ca_vt));
        let mut fused = Array2::zeros((b * n, d));
        for i in 0..b {
            for j in 0..n {
                fused.row_mut(i * n + j).assign(&vt.row(i));
            }
        }
        let active_visual = input
            .visual
            .as_ref()
            .filter(|_| input.tau.iter().any(|&t| t != 0.0));
        let (kv, vv, ca_a) = match active_visual {
            Some(vis) => {
                let m = self.cfg.visual_tokens;
                let kv = vis.dot(&view(p, sl.ca_kv));
                let vv = vis.dot(&view(p, sl.ca_vv));
                let (ov, a) = attend(&cq, &kv, &vv, b, n, m);
                for i in 0..b {
                    let tau = input.tau[i];
                    if tau == 0.0 {
                        continue;
                    }
                    let mut rows = fused.slice_mut(s![i * n..(i + 1) * n, ..]);
                    rows.scaled_add(tau, &ov.slice(s![i * n..(i + 1) * n, ..]));
                }
                (Some(kv), Some(vv), a)
            }
            None => (None, None, Vec::new()),
        };
        let proj = fused.dot(&view(p, sl.ca_o));
        hid = hid + proj.into_shape_with_order((b, h)).expect("tokens merge");
        let cross = CrossCache {
            tokens,
            q: cq,
            text_emb,
            kv,
            vv,
            a: ca_a,
            fused,
        };

        hid += &temb;
        let mut post = Vec::with_capacity(sl.post.len());
        for blk in &sl.post {
            let (next, cache) = block_forward(p, blk, hid);
            post.push(cache);
            hid = next;
        }
        let out = hid.dot(&view(p, sl.out_w)) + view(p, sl.out_b);
        let cache = ForwardCache {
            batch: b,
            perturb: input.perturb,
            labels: input.labels.to_vec(),
            tau: input.tau.to_vec(),
            visual: active_visual.map(|v| v.to_owned()),
            time_feat,
            time_pre,
            x,
            pre,
            sa,
            cross,
            post,
            last_hidden: hid,
        };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients of `⟨d_out, forward(input)⟩` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let p = &self.params;
        let sl = &self.slots;
        let b = cache.batch;
        let (h, n, d) = (self.cfg.hidden, self.cfg.tokens, self.cfg.token_dim());

        // Output projection.
        view_mut(grads, sl.out_w).scaled_add(1.0, &cache.last_hidden.t().dot(d_out));
        view_mut(grads, sl.out_b).scaled_add(1.0, &d_out.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let mut dh = d_out.dot(&view(p, sl.out_w).t());

        for (blk, bc) in sl.post.iter().zip(&cache.post).rev() {
            dh = block_backward(p, grads, blk, bc, dh);
        }
        // hid = hid + temb before the post blocks.
        let mut d_temb = dh.clone();

        // Cross-attention.
        let cc = &cache.cross;
        let d_proj = dh.clone().into_shape_with_order((b * n, d)).expect("tokens");
        view_mut(grads, sl.ca_o).scaled_add(1.0, &cc.fused.t().dot(&d_proj));
        let d_fused = d_proj.dot(&view(p, sl.ca_o).t());
        let mut d_vt = Array2::zeros((b, d));
        for i in 0..b {
            d_vt.row_mut(i)
                .assign(&d_fused.slice(s![i * n..(i + 1) * n, ..]).sum_axis(Axis(0)));
        }
        view_mut(grads, sl.ca_vt).scaled_add(1.0, &cc.text_emb.t().dot(&d_vt));
        let d_text = d_vt.dot(&view(p, sl.ca_vt).t());
        {
            let mut emb = view_mut(grads, sl.txt_emb);
            for (i, &l) in cache.labels.iter().enumerate() {
                let mut row = emb.row_mut(l);
                row += &d_text.row(i);
            }
        }
        let mut d_tokens_cross = Array2::zeros((b * n, d));
        if let (Some(vis), Some(kv), Some(vv)) = (&cache.visual, &cc.kv, &cc.vv) {
            let m = self.cfg.visual_tokens;
            let mut d_ov = d_fused.clone();
            for i in 0..b {
                d_ov.slice_mut(s![i * n..(i + 1) * n, ..]).mapv_inplace(|g| g * cache.tau[i]);
            }
            let (dq, dk, dv) = attend_backward(&cc.q, kv, vv, &cc.a, &d_ov, b, n, m);
            view_mut(grads, sl.ca_kv).scaled_add(1.0, &vis.t().dot(&dk));
            view_mut(grads, sl.ca_vv).scaled_add(1.0, &vis.t().dot(&dv));
            view_mut(grads, sl.ca_q).scaled_add(1.0, &cc.tokens.t().dot(&dq));
            d_tokens_cross = dq.dot(&view(p, sl.ca_q).t());
        }
        dh = dh + d_tokens_cross.into_shape_with_order((b, h)).expect("tokens merge");

        // Self-attention.
        let sc = &cache.sa;
        let d_proj = dh.clone().into_shape_with_order((b * n, d)).expect("tokens");
        view_mut(grads, sl.sa_o).scaled_add(1.0, &sc.out.t().dot(&d_proj));
        let d_attn = d_proj.dot(&view(p, sl.sa_o).t());
        let (dq, dk, dv) = if cache.perturb {
            (Array2::zeros((b * n, d)), Array2::zeros((b * n, d)), d_attn)
        } else {
            attend_backward(&sc.q, &sc.k, &sc.v, &sc.a, &d_attn, b, n, n)
        };
        view_mut(grads, sl.sa_q).scaled_add(1.0, &sc.tokens.t().dot(&dq));
        view_mut(grads, sl.sa_k).scaled_add(1.0, &sc.tokens.t().dot(&dk));
        view_mut(grads, sl.sa_v).scaled_add(1.0, &sc.tokens.t().dot(&dv));
        let d_tokens = dq.dot(&view(p, sl.sa_q).t()) + dk.dot(&view(p, sl.sa_k).t()) + dv.dot(&view(p, sl.sa_v).t());
        dh = dh + d_tokens.into_shape_with_order((b, h)).expect("tokens merge");

        for (blk, bc) in sl.pre.iter().zip(&cache.pre).rev() {
            dh = block_backward(p, grads, blk, bc, dh);
        }

        // Input projection and time embedding.
        view_mut(grads, sl.in_w).scaled_add(1.0, &cache.x.t().dot(&dh));
        view_mut(grads, sl.in_b).scaled_add(1.0, &dh.sum_axis(Axis(0)).insert_axis(Axis(0)));
        d_temb += &dh;
        let d_time_pre = &d_temb * &cache.time_pre.mapv(silu_grad);
        view_mut(grads, sl.time_w).scaled_add(1.0, &cache.time_feat.t().dot(&d_time_pre));
        view_mut(grads, sl.time_b).scaled_add(1.0, &d_time_pre.sum_axis(Axis(0)).insert_axis(Axis(0)));
    }
}

fn block_forward(p: &[f64], blk: &BlockSlots, input: Array2<f64>) -> (Array2<f64>, BlockCache) {
    let pre_act = input.dot(&view(p, blk.wa)) + view(p, blk.ba);
    let act = pre_act.mapv(silu);
    let out = &input + &(act.dot(&view(p, blk.wb)) + view(p, blk.bb));
    (out, BlockCache { input, pre_act, act })
}

fn block_backward(p: &[f64], grads: &mut [f64], blk: &BlockSlots, c: &BlockCache, d_out: Array2<f64>) -> Array2<f64> {
    view_mut(grads, blk.wb).scaled_add(1.0, &c.act.t().dot(&d_out));
    view_mut(grads, blk.bb).scaled_add(1.0, &d_out.sum_axis(Axis(0)).insert_axis(Axis(0)));
    let d_act = d_out.dot(&view(p, blk.wb).t());
    let d_pre = d_act * &c.pre_act.mapv(silu_grad);
    view_mut(grads, blk.wa).scaled_add(1.0, &c.input.t().dot(&d_pre));
    view_mut(grads, blk.ba).scaled_add(1.0, &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0)));
    d_out + d_pre.dot(&view(p, blk.wa).t())
}

/// Batched attention: for each sample, `nq` query rows attend over `nk` key rows.
/// Returns the outputs and the row-major attention maps (B × nq × nk).
fn attend(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, b: usize, nq: usize, nk: usize) -> (Array2<f64>, Vec<f64>) {
    let d = q.ncols();
    let dv = v.ncols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut maps = vec![0.0; b * nq * nk];
    let mut out = Array2::zeros((b * nq, dv));
    for s in 0..b {
        for i in 0..nq {
            let qi = q.row(s * nq + i);
            let row = &mut maps[(s * nq + i) * nk..(s * nq + i + 1) * nk];
            for (j, r) in row.iter_mut().enumerate() {
                *r = qi.dot(&k.row(s * nk + j)) * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
            let mut o = out.row_mut(s * nq + i);
            for (j, &w) in row.iter().enumerate() {
                o.scaled_add(w, &v.row(s * nk + j));
            }
        }
    }
    (out, maps)
}

#[allow(clippy::too_many_arguments)]
fn attend_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    maps: &[f64],
    d_out: &Array2<f64>,
    b: usize,
    nq: usize,
    nk: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = q.ncols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut d_map = vec![0.0; nk];
    for s in 0..b {
        for i in 0..nq {
            let a = &maps[(s * nq + i) * nk..(s * nq + i + 1) * nk];
            let go = d_out.row(s * nq + i);
            for j in 0..nk {
                d_map[j] = go.dot(&v.row(s * nk + j));
                dv.row_mut(s * nk + j).scaled_add(a[j], &go);
            }
            let inner: f64 = a.iter().zip(&d_map).map(|(x, y)| x * y).sum();
            for j in 0..nk {
                let ds = a[j] * (d_map[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                dq.row_mut(s * nq + i).scaled_add(ds, &k.row(s * nk + j));
                dk.row_mut(s * nk + j).scaled_add(ds, &q.row(s * nq + i));
            }
        }
    }
    (dq, dk, dv)
}
