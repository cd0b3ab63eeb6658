//! Pre-norm encoder-decoder forward pass and its hand-written backward pass.
//!
//! Every sublayer computes `x + dropout(f(layer_norm(x)))`. Both stacks end
//! with a final layer norm, and output logits are the decoder state times the
//! transposed embedding matrix. Sequences are processed one example at a
//! time at their true length, which is equivalent to masking padding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{
    AttentionParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams, LayerNormParams,
    ModelParams,
};
use super::tensor::{gemm, matmul, matmul_nt, matmul_tn, softmax_in_place, Mat};

const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Mat, p: &LayerNormParams) -> (Mat, LnCache) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let yr = &mut y.data[r * d..(r + 1) * d];
        let xr = &xhat.data[r * d..(r + 1) * d];
        for (((o, x), g), b) in yr.iter_mut().zip(xr).zip(&p.gain.data).zip(&p.bias.data) {
            *o = x * g + b;
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Mat, p: &LayerNormParams, c: &LnCache, g: &mut LayerNormParams) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = c.xhat.row(r);
        for i in 0..d {
            g.gain.data[i] += dyr[i] * xh[i];
            g.bias.data[i] += dyr[i];
            dxhat[i] = dyr[i] * p.gain.data[i];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = c.rstd[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn linear(x: &Mat, w: &Mat, b: Option<&Mat>) -> Mat {
    let mut y = matmul(x, w);
    if let Some(b) = b {
        y.add_row_broadcast(b);
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, gw: &mut Mat, gb: Option<&mut Mat>) -> Mat {
    gemm(x, true, dy, false, 1.0, gw);
    if let Some(gb) = gb {
        dy.col_sums_into(gb);
    }
    matmul_nt(dy, w)
}

pub(crate) struct AttnCache {
    q_in: Mat,
    kv_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
}

pub(crate) fn attention(
    q_in: &Mat,
    kv_in: &Mat,
    p: &AttentionParams,
    n_heads: usize,
    causal: bool,
) -> (Mat, AttnCache) {
    let d = p.wq.cols;
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = linear(q_in, &p.wq, Some(&p.bq));
    let k = linear(kv_in, &p.wk, None);
    let v = linear(kv_in, &p.wv, Some(&p.bv));
    let mut ctx = Mat::zeros(q_in.rows, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.cols_slice(h * dk, dk);
        let kh = k.cols_slice(h * dk, dk);
        let vh = v.cols_slice(h * dk, dk);
        let mut s = matmul_nt(&qh, &kh);
        for i in 0..s.rows {
            let row = s.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                *x = if causal && j > i {
                    f64::NEG_INFINITY
                } else {
                    *x * scale
                };
            }
            softmax_in_place(row);
        }
        ctx.set_cols(h * dk, &matmul(&s, &vh));
        probs.push(s);
    }
    let out = linear(&ctx, &p.wo, Some(&p.bo));
    (
        out,
        AttnCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns gradients with respect to the query input and the key/value input.
fn attention_backward(
    dout: &Mat,
    p: &AttentionParams,
    c: &AttnCache,
    n_heads: usize,
    g: &mut AttentionParams,
) -> (Mat, Mat) {
    let d = p.wq.cols;
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let dctx = linear_backward(&c.ctx, &p.wo, dout, &mut g.wo, Some(&mut g.bo));
    let mut dq = Mat::zeros(c.q.rows, d);
    let mut dkm = Mat::zeros(c.k.rows, d);
    let mut dv = Mat::zeros(c.v.rows, d);
    for h in 0..n_heads {
        let probs = &c.probs[h];
        let qh = c.q.cols_slice(h * dk, dk);
        let kh = c.k.cols_slice(h * dk, dk);
        let vh = c.v.cols_slice(h * dk, dk);
        let dch = dctx.cols_slice(h * dk, dk);
        let mut ds = matmul_nt(&dch, &vh);
        dv.set_cols(h * dk, &matmul_tn(probs, &dch));
        for i in 0..ds.rows {
            let pr = probs.row(i);
            let dot: f64 = ds.row(i).iter().zip(pr).map(|(a, b)| a * b).sum();
            for (x, pv) in ds.row_mut(i).iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        dq.set_cols(h * dk, &matmul(&ds, &kh));
        dkm.set_cols(h * dk, &matmul_tn(&ds, &qh));
    }
    let dq_in = linear_backward(&c.q_in, &p.wq, &dq, &mut g.wq, Some(&mut g.bq));
    let mut dkv_in = linear_backward(&c.kv_in, &p.wk, &dkm, &mut g.wk, None);
    dkv_in.add_assign(&linear_backward(
        &c.kv_in,
        &p.wv,
        &dv,
        &mut g.wv,
        Some(&mut g.bv),
    ));
    (dq_in, dkv_in)
}

pub(crate) struct FfnCache {
    x: Mat,
    act: Mat,
}

pub(crate) fn feed_forward(x: &Mat, p: &FeedForwardParams) -> (Mat, FfnCache) {
    let mut act = linear(x, &p.w1, Some(&p.b1));
    for v in &mut act.data {
        *v = v.max(0.0);
    }
    let y = linear(&act, &p.w2, Some(&p.b2));
    (y, FfnCache { x: x.clone(), act })
}

fn feed_forward_backward(
    dy: &Mat,
    p: &FeedForwardParams,
    c: &FfnCache,
    g: &mut FeedForwardParams,
) -> Mat {
    let mut dact = linear_backward(&c.act, &p.w2, dy, &mut g.w2, Some(&mut g.b2));
    for (d, a) in dact.data.iter_mut().zip(&c.act.data) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    linear_backward(&c.x, &p.w1, &dact, &mut g.w1, Some(&mut g.b1))
}

/// Inverted dropout; the returned mask already carries the `1/(1-p)` scale.
fn dropout(x: &mut Mat, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.data.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    for (v, m) in x.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn dropout_backward(dy: &Mat, mask: &Option<Vec<f64>>) -> Mat {
    let mut dx = dy.clone();
    if let Some(m) = mask {
        for (v, k) in dx.data.iter_mut().zip(m) {
            *v *= k;
        }
    }
    dx
}

pub(crate) fn embed(params: &ModelParams, ids: &[u32]) -> Mat {
    let d = params.config.d_model;
    let scale = (d as f64).sqrt();
    let mut x = Mat::zeros(ids.len(), d);
    for (pos, &id) in ids.iter().enumerate() {
        let e = params.embedding.row(id as usize);
        let pe = params.positions.row(pos);
        for ((o, a), b) in x.row_mut(pos).iter_mut().zip(e).zip(pe) {
            *o = a * scale + b;
        }
    }
    x
}

fn embed_backward(params: &ModelParams, ids: &[u32], dx: &Mat, g: &mut ModelParams) {
    let scale = (params.config.d_model as f64).sqrt();
    for (pos, &id) in ids.iter().enumerate() {
        for (o, v) in g.embedding.row_mut(id as usize).iter_mut().zip(dx.row(pos)) {
            *o += v * scale;
        }
    }
}

struct EncoderLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    drop1: Option<Vec<f64>>,
    ln2: LnCache,
    ffn: FfnCache,
    drop2: Option<Vec<f64>>,
}

struct DecoderLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    drop1: Option<Vec<f64>>,
    ln2: LnCache,
    cross: AttnCache,
    drop2: Option<Vec<f64>>,
    ln3: LnCache,
    ffn: FfnCache,
    drop3: Option<Vec<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    input_ids: Vec<u32>,
    decoder_ids: Vec<u32>,
    enc_drop: Option<Vec<f64>>,
    enc_layers: Vec<EncoderLayerCache>,
    enc_norm: LnCache,
    dec_drop: Option<Vec<f64>>,
    dec_layers: Vec<DecoderLayerCache>,
    dec_norm: LnCache,
    dec_out: Mat,
    /// `decoder length x vocab`
    pub logits: Mat,
}

fn encoder_layer(
    x: &mut Mat,
    l: &EncoderLayerParams,
    heads: usize,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> EncoderLayerCache {
    let (h, ln1) = layer_norm(x, &l.norm1);
    let (mut a, attn) = attention(&h, &h, &l.self_attn, heads, false);
    let drop1 = dropout(&mut a, rate, rng.as_deref_mut());
    x.add_assign(&a);
    let (h, ln2) = layer_norm(x, &l.norm2);
    let (mut f, ffn) = feed_forward(&h, &l.ffn);
    let drop2 = dropout(&mut f, rate, rng);
    x.add_assign(&f);
    EncoderLayerCache {
        ln1,
        attn,
        drop1,
        ln2,
        ffn,
        drop2,
    }
}

fn decoder_layer(
    y: &mut Mat,
    enc: &Mat,
    l: &DecoderLayerParams,
    heads: usize,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> DecoderLayerCache {
    let (h, ln1) = layer_norm(y, &l.norm1);
    let (mut a, self_attn) = attention(&h, &h, &l.self_attn, heads, true);
    let drop1 = dropout(&mut a, rate, rng.as_deref_mut());
    y.add_assign(&a);
    let (h, ln2) = layer_norm(y, &l.norm2);
    let (mut c, cross) = attention(&h, enc, &l.cross_attn, heads, false);
    let drop2 = dropout(&mut c, rate, rng.as_deref_mut());
    y.add_assign(&c);
    let (h, ln3) = layer_norm(y, &l.norm3);
    let (mut f, ffn) = feed_forward(&h, &l.ffn);
    let drop3 = dropout(&mut f, rate, rng);
    y.add_assign(&f);
    DecoderLayerCache {
        ln1,
        self_attn,
        drop1,
        ln2,
        cross,
        drop2,
        ln3,
        ffn,
        drop3,
    }
}

/// Runs the encoder without recording a tape.
pub fn encode(params: &ModelParams, input_ids: &[u32]) -> Mat {
    let cfg = &params.config;
    let mut x = embed(params, input_ids);
    for l in &params.encoder {
        encoder_layer(&mut x, l, cfg.n_heads, 0.0, None);
    }
    layer_norm(&x, &params.encoder_norm).0
}

/// Full forward pass. Passing an RNG enables dropout.
pub fn forward_tape(
    params: &ModelParams,
    input_ids: &[u32],
    decoder_ids: &[u32],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Tape {
    let cfg = &params.config;
    let rate = cfg.dropout_rate;

    let mut x = embed(params, input_ids);
    let enc_drop = dropout(&mut x, rate, rng.as_deref_mut());
    let enc_layers: Vec<_> = params
        .encoder
        .iter()
        .map(|l| encoder_layer(&mut x, l, cfg.n_heads, rate, rng.as_deref_mut()))
        .collect();
    let (enc_out, enc_norm) = layer_norm(&x, &params.encoder_norm);

    let mut y = embed(params, decoder_ids);
    let dec_drop = dropout(&mut y, rate, rng.as_deref_mut());
    let dec_layers: Vec<_> = params
        .decoder
        .iter()
        .map(|l| decoder_layer(&mut y, &enc_out, l, cfg.n_heads, rate, rng.as_deref_mut()))
        .collect();
    let (dec_out, dec_norm) = layer_norm(&y, &params.decoder_norm);
    let logits = matmul_nt(&dec_out, &params.embedding);

    Tape {
        input_ids: input_ids.to_vec(),
        decoder_ids: decoder_ids.to_vec(),
        enc_drop,
        enc_layers,
        enc_norm,
        dec_drop,
        dec_layers,
        dec_norm,
        dec_out,
        logits,
    }
}

/// Accumulates into `g` the gradient of a scalar whose derivative with
/// respect to the logits is `dlogits`.
pub fn backward_tape(params: &ModelParams, tape: &Tape, dlogits: &Mat, g: &mut ModelParams) {
    let heads = params.config.n_heads;

    // logits = dec_out * E^T
    gemm(dlogits, true, &tape.dec_out, false, 1.0, &mut g.embedding);
    let dout = matmul(dlogits, &params.embedding);

    let mut dy = layer_norm_backward(
        &dout,
        &params.decoder_norm,
        &tape.dec_norm,
        &mut g.decoder_norm,
    );
    let mut denc = Mat::zeros(tape.input_ids.len(), params.config.d_model);
    for ((l, c), gl) in params
        .decoder
        .iter()
        .zip(&tape.dec_layers)
        .zip(g.decoder.iter_mut())
        .rev()
    {
        let df = dropout_backward(&dy, &c.drop3);
        let dh = feed_forward_backward(&df, &l.ffn, &c.ffn, &mut gl.ffn);
        dy.add_assign(&layer_norm_backward(&dh, &l.norm3, &c.ln3, &mut gl.norm3));

        let dc = dropout_backward(&dy, &c.drop2);
        let (dh, dkv) = attention_backward(&dc, &l.cross_attn, &c.cross, heads, &mut gl.cross_attn);
        denc.add_assign(&dkv);
        dy.add_assign(&layer_norm_backward(&dh, &l.norm2, &c.ln2, &mut gl.norm2));

        let da = dropout_backward(&dy, &c.drop1);
        let (dq, dkv) =
            attention_backward(&da, &l.self_attn, &c.self_attn, heads, &mut gl.self_attn);
        let mut dh = dq;
        dh.add_assign(&dkv);
        dy.add_assign(&layer_norm_backward(&dh, &l.norm1, &c.ln1, &mut gl.norm1));
    }
    let dy = dropout_backward(&dy, &tape.dec_drop);
    embed_backward(params, &tape.decoder_ids, &dy, g);

    let mut dx = layer_norm_backward(
        &denc,
        &params.encoder_norm,
        &tape.enc_norm,
        &mut g.encoder_norm,
    );
    for ((l, c), gl) in params
        .encoder
        .iter()
        .zip(&tape.enc_layers)
        .zip(g.encoder.iter_mut())
        .rev()
    {
        let df = dropout_backward(&dx, &c.drop2);
        let dh = feed_forward_backward(&df, &l.ffn, &c.ffn, &mut gl.ffn);
        dx.add_assign(&layer_norm_backward(&dh, &l.norm2, &c.ln2, &mut gl.norm2));

        let da = dropout_backward(&dx, &c.drop1);
        let (dq, dkv) = attention_backward(&da, &l.self_attn, &c.attn, heads, &mut gl.self_attn);
        let mut dh = dq;
        dh.add_assign(&dkv);
        dx.add_assign(&layer_norm_backward(&dh, &l.norm1, &c.ln1, &mut gl.norm1));
    }
    let dx = dropout_backward(&dx, &tape.enc_drop);
    embed_backward(params, &tape.input_ids, &dx, g);
}

/// Key/value rows of one decoder layer, grown one position at a time.
#[derive(Debug, Clone)]
struct LayerState {
    self_k: Mat,
    self_v: Mat,
    cross_k: Mat,
    cross_v: Mat,
}

/// Incremental decoder for generation. Feeding tokens one by one yields the
/// same logits as a full causal forward pass over the whole prefix.
#[derive(Debug, Clone)]
pub struct DecoderState {
    layers: Vec<LayerState>,
    len: usize,
}

fn append_row(m: &mut Mat, row: &[f64]) {
    m.data.extend_from_slice(row);
    m.rows += 1;
}

fn attend_one(q: &[f64], k: &Mat, v: &Mat, p: &AttentionParams, heads: usize) -> Mat {
    let d = q.len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = Mat::zeros(1, d);
    let mut scores = vec![0.0; k.rows];
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        for (j, s) in scores.iter_mut().enumerate() {
            let kr = &k.row(j)[h * dk..(h + 1) * dk];
            *s = qh.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut scores);
        let out = &mut ctx.data[h * dk..(h + 1) * dk];
        for (j, s) in scores.iter().enumerate() {
            let vr = &v.row(j)[h * dk..(h + 1) * dk];
            for (o, x) in out.iter_mut().zip(vr) {
                *o += s * x;
            }
        }
    }
    linear(&ctx, &p.wo, Some(&p.bo))
}

impl DecoderState {
    pub fn new(params: &ModelParams, enc_out: &Mat) -> Self {
        let d = params.config.d_model;
        let layers = params
            .decoder
            .iter()
            .map(|l| LayerState {
                self_k: Mat::zeros(0, d),
                self_v: Mat::zeros(0, d),
                cross_k: linear(enc_out, &l.cross_attn.wk, None),
                cross_v: linear(enc_out, &l.cross_attn.wv, Some(&l.cross_attn.bv)),
            })
            .collect();
        DecoderState { layers, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one decoder input token and returns the logits for the next.
    pub fn step(&mut self, params: &ModelParams, token: u32) -> Vec<f64> {
        let heads = params.config.n_heads;
        let mut y = embed_at(params, token, self.len);
        for (l, st) in params.decoder.iter().zip(self.layers.iter_mut()) {
            let (h, _) = layer_norm(&y, &l.norm1);
            let q = linear(&h, &l.self_attn.wq, Some(&l.self_attn.bq));
            append_row(&mut st.self_k, linear(&h, &l.self_attn.wk, None).row(0));
            append_row(
                &mut st.self_v,
                linear(&h, &l.self_attn.wv, Some(&l.self_attn.bv)).row(0),
            );
            y.add_assign(&attend_one(
                q.row(0),
                &st.self_k,
                &st.self_v,
                &l.self_attn,
                heads,
            ));

            let (h, _) = layer_norm(&y, &l.norm2);
            let q = linear(&h, &l.cross_attn.wq, Some(&l.cross_attn.bq));
            y.add_assign(&attend_one(
                q.row(0),
                &st.cross_k,
                &st.cross_v,
                &l.cross_attn,
                heads,
            ));

            let (h, _) = layer_norm(&y, &l.norm3);
            y.add_assign(&feed_forward(&h, &l.ffn).0);
        }
        self.len += 1;
        let (out, _) = layer_norm(&y, &params.decoder_norm);
        matmul_nt(&out, &params.embedding).data
    }
}

fn embed_at(params: &ModelParams, token: u32, pos: usize) -> Mat {
    let d = params.config.d_model;
    let scale = (d as f64).sqrt();
    let e = params.embedding.row(token as usize);
    let pe = params.positions.row(pos);
    Mat::from_vec(1, d, e.iter().zip(pe).map(|(a, b)| a * scale + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::model::tests::tiny_config;

    #[test]
    fn absent_token_rows_get_only_the_output_projection_gradient() {
        // With the output projection tied to the embedding, a token absent
        // from the example still receives gradient through the softmax, and
        // nothing else.
        let p = ModelParams::init(&tiny_config(12), 7).unwrap();
        let input = [7, 9, 10];
        let dec = [2, 8, 9];
        let tape = forward_tape(&p, &input, &dec, None);
        let mut dlogits = tape.logits.clone();
        for r in 0..dlogits.rows {
            softmax_in_place(dlogits.row_mut(r));
        }
        let mut g = p.zeros_like();
        backward_tape(&p, &tape, &dlogits, &mut g);
        for tok in [0usize, 1, 4, 11] {
            for c in 0..p.config.d_model {
                let expected: f64 = (0..dec.len())
                    .map(|j| dlogits.row(j)[tok] * tape.dec_out.row(j)[c])
                    .sum();
                assert!((g.embedding.row(tok)[c] - expected).abs() < 1e-14);
            }
        }
        // A token present in the example gets more than that.
        let present: f64 = (0..dec.len())
            .map(|j| dlogits.row(j)[9] * tape.dec_out.row(j)[0])
            .sum();
        assert!((g.embedding.row(9)[0] - present).abs() > 1e-9);
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let mut x = Mat::from_vec(4, 50, vec![1.0; 200]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = dropout(&mut x, 0.25, Some(&mut rng)).unwrap();
        for (v, m) in x.data.iter().zip(&mask) {
            assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-15);
            assert_eq!(*v, *m);
        }
        let kept = mask.iter().filter(|m| **m > 0.0).count();
        assert!((120..180).contains(&kept));
        let mut y = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        assert!(dropout(&mut y, 0.25, None).is_none());
        assert_eq!(y.data, vec![1.0, 2.0, 3.0]);
    }
}
