//! Encoder-decoder forward pass, loss, and hand-written backward pass.
//!
//! Both stacks are pre-norm: every sub-block sees a layer-normalized copy of
//! its input and the un-normalized input is added back to the sub-block
//! output. Pad positions are never fed through the network, which makes them
//! invisible to attention and to the loss.

use rayon::prelude::*;

use super::layers::*;
use super::params::{DecoderLayer, EncoderLayer, Params};
use super::tensor::Mat;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tokenizer::{special, TokenSeq};

/// Output of the embedding layer for one input sequence: one row per input
/// position (`max_input_len` rows), of which the first `len` are real.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSeq<F> {
    pub rows: Mat<F>,
    pub len: usize,
}

impl<F: Float> EmbeddingSeq<F> {
    /// `self + delta`, keeping pad rows at their original value.
    pub fn perturbed(&self, delta: &Mat<F>) -> Self {
        let mut rows = self.rows.clone();
        for r in 0..self.len {
            for (x, &d) in rows.row_mut(r).iter_mut().zip(delta.row(r)) {
                *x += d;
            }
        }
        Self { rows, len: self.len }
    }
}

/// One (input, target) training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: TokenSeq,
    pub target: TokenSeq,
}

struct EncCache<F> {
    attn_norm: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ffn_norm: LayerNormCache<F>,
    ffn: FfnCache<F>,
}

struct DecCache<F> {
    self_norm: LayerNormCache<F>,
    self_attn: AttentionCache<F>,
    cross_norm: LayerNormCache<F>,
    cross_attn: AttentionCache<F>,
    ffn_norm: LayerNormCache<F>,
    ffn: FfnCache<F>,
}

struct Cache<F> {
    input_ids: Vec<u32>,
    decoder_ids: Vec<u32>,
    targets: Vec<u32>,
    encoder: Vec<EncCache<F>>,
    encoder_norm: LayerNormCache<F>,
    decoder: Vec<DecCache<F>>,
    decoder_norm: LayerNormCache<F>,
    decoder_out: Mat<F>,
    probs: Mat<F>,
}

/// Everything a backward pass needs, plus the observable outputs.
pub struct ForwardTrace<'p, F> {
    params: &'p Params<F>,
    pub loss: F,
    /// Logits per target position (`target.true_len x vocab`).
    pub logits: Mat<F>,
    /// Final encoder hidden states for the real input positions.
    pub encoder_out: Mat<F>,
    cache: Option<Cache<F>>,
}

pub struct Gradients<F> {
    pub params: Params<F>,
    /// dL/d(embedding output), `max_input_len` rows; pad rows are zero.
    pub embedding: Mat<F>,
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&bad) => Err(Error::UnknownTokenId(bad)),
        None => Ok(()),
    }
}

/// Token plus learned absolute position embeddings for the encoder input.
pub fn embed<F: Float>(params: &Params<F>, input: &TokenSeq) -> Result<EmbeddingSeq<F>> {
    let cfg = &params.config;
    let len = input.true_len();
    if len == 0 {
        return Err(Error::ShapeMismatch {
            op: "embed",
            expected: "at least one input token".into(),
            found: "0".into(),
        });
    }
    if len > cfg.max_input_len {
        return Err(Error::ShapeMismatch {
            op: "embed",
            expected: format!("at most {} input tokens", cfg.max_input_len),
            found: len.to_string(),
        });
    }
    check_ids(input.content(), cfg.vocab_size)?;
    let mut rows = Mat::zeros(cfg.max_input_len, cfg.hidden);
    for (i, &id) in input.content().iter().enumerate() {
        let dst = rows.row_mut(i);
        for ((d, &t), &p) in dst
            .iter_mut()
            .zip(params.token_embed.row(id as usize))
            .zip(params.encoder_pos.row(i))
        {
            *d = t + p;
        }
    }
    Ok(EmbeddingSeq { rows, len })
}

fn encoder_layer_forward<F: Float>(l: &EncoderLayer<F>, x: &Mat<F>, heads: usize) -> (Mat<F>, EncCache<F>) {
    let (n1, attn_norm) = layer_norm_forward(&l.attn_norm, x);
    let (a, attn) = attention_forward(&l.attn, &n1, None, heads, false);
    let h = x.add(&a);
    let (n2, ffn_norm) = layer_norm_forward(&l.ffn_norm, &h);
    let (f, ffn) = ffn_forward(&l.ffn, &n2);
    let out = h.add(&f);
    (
        out,
        EncCache {
            attn_norm,
            attn,
            ffn_norm,
            ffn,
        },
    )
}

fn encoder_layer_backward<F: Float>(
    l: &EncoderLayer<F>,
    c: &EncCache<F>,
    dout: &Mat<F>,
    g: &mut EncoderLayer<F>,
) -> Mat<F> {
    let dn2 = ffn_backward(&l.ffn, &c.ffn, dout, &mut g.ffn);
    let mut dh = dout.clone();
    dh.add_assign(&layer_norm_backward(&l.ffn_norm, &c.ffn_norm, &dn2, &mut g.ffn_norm));
    let (dn1, _) = attention_backward(&l.attn, &c.attn, &dh, &mut g.attn);
    let mut dx = dh;
    dx.add_assign(&layer_norm_backward(&l.attn_norm, &c.attn_norm, &dn1, &mut g.attn_norm));
    dx
}

fn decoder_layer_forward<F: Float>(
    l: &DecoderLayer<F>,
    y: &Mat<F>,
    memory: &Mat<F>,
    heads: usize,
) -> (Mat<F>, DecCache<F>) {
    let (n1, self_norm) = layer_norm_forward(&l.self_norm, y);
    let (s, self_attn) = attention_forward(&l.self_attn, &n1, None, heads, true);
    let h1 = y.add(&s);
    let (n2, cross_norm) = layer_norm_forward(&l.cross_norm, &h1);
    let (c, cross_attn) = attention_forward(&l.cross_attn, &n2, Some(memory), heads, false);
    let h2 = h1.add(&c);
    let (n3, ffn_norm) = layer_norm_forward(&l.ffn_norm, &h2);
    let (f, ffn) = ffn_forward(&l.ffn, &n3);
    let out = h2.add(&f);
    (
        out,
        DecCache {
            self_norm,
            self_attn,
            cross_norm,
            cross_attn,
            ffn_norm,
            ffn,
        },
    )
}

/// Returns `d y`; adds the memory gradient into `dmemory`.
fn decoder_layer_backward<F: Float>(
    l: &DecoderLayer<F>,
    c: &DecCache<F>,
    dout: &Mat<F>,
    g: &mut DecoderLayer<F>,
    dmemory: &mut Mat<F>,
) -> Mat<F> {
    let dn3 = ffn_backward(&l.ffn, &c.ffn, dout, &mut g.ffn);
    let mut dh2 = dout.clone();
    dh2.add_assign(&layer_norm_backward(&l.ffn_norm, &c.ffn_norm, &dn3, &mut g.ffn_norm));

    let (dn2, dmem) = attention_backward(&l.cross_attn, &c.cross_attn, &dh2, &mut g.cross_attn);
    dmemory.add_assign(&dmem.expect("cross attention yields a memory gradient"));
    let mut dh1 = dh2;
    dh1.add_assign(&layer_norm_backward(&l.cross_norm, &c.cross_norm, &dn2, &mut g.cross_norm));

    let (dn1, _) = attention_backward(&l.self_attn, &c.self_attn, &dh1, &mut g.self_attn);
    let mut dy = dh1;
    dy.add_assign(&layer_norm_backward(&l.self_norm, &c.self_norm, &dn1, &mut g.self_norm));
    dy
}

fn decoder_embed<F: Float>(params: &Params<F>, ids: &[u32]) -> Mat<F> {
    let mut y = Mat::zeros(ids.len(), params.config.hidden);
    for (i, &id) in ids.iter().enumerate() {
        for ((d, &t), &p) in y
            .row_mut(i)
            .iter_mut()
            .zip(params.token_embed.row(id as usize))
            .zip(params.decoder_pos.row(i))
        {
            *d = t + p;
        }
    }
    y
}

fn run_encoder<F: Float>(params: &Params<F>, x: &Mat<F>) -> (Mat<F>, Vec<EncCache<F>>, LayerNormCache<F>) {
    let heads = params.config.heads;
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(params.encoder.len());
    for l in &params.encoder {
        let (out, c) = encoder_layer_forward(l, &h, heads);
        h = out;
        caches.push(c);
    }
    let (out, norm) = layer_norm_forward(&params.encoder_norm, &h);
    (out, caches, norm)
}

fn run_decoder<F: Float>(
    params: &Params<F>,
    decoder_ids: &[u32],
    memory: &Mat<F>,
) -> (Mat<F>, Vec<DecCache<F>>, LayerNormCache<F>) {
    let heads = params.config.heads;
    let mut h = decoder_embed(params, decoder_ids);
    let mut caches = Vec::with_capacity(params.decoder.len());
    for l in &params.decoder {
        let (out, c) = decoder_layer_forward(l, &h, memory, heads);
        h = out;
        caches.push(c);
    }
    let (out, norm) = layer_norm_forward(&params.decoder_norm, &h);
    (out, caches, norm)
}

fn project<F: Float>(params: &Params<F>, hidden: &Mat<F>) -> Mat<F> {
    let mut logits = hidden.matmul(&params.out_w);
    logits.add_row_vector(&params.out_b);
    logits
}

fn log_softmax_row<F: Float>(row: &[F]) -> Vec<F> {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Teacher-forced forward pass with summed token cross-entropy.
///
/// `override_embeddings` replaces the encoder embedding output; it is the
/// injection point for adversarial perturbations. Parameter gradients treat
/// it as `embed(input) + delta`, so embedding tables still receive gradient.
pub fn forward<'p, F: Float>(
    params: &'p Params<F>,
    input: &TokenSeq,
    target: &TokenSeq,
    override_embeddings: Option<&EmbeddingSeq<F>>,
) -> Result<ForwardTrace<'p, F>> {
    let cfg = &params.config;
    let owned;
    let emb = match override_embeddings {
        Some(e) => {
            if e.rows.shape() != (cfg.max_input_len, cfg.hidden) || e.len != input.true_len() {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    expected: format!("{}x{} embeddings with {} real rows", cfg.max_input_len, cfg.hidden, input.true_len()),
                    found: format!("{}x{} with {}", e.rows.rows(), e.rows.cols(), e.len),
                });
            }
            check_ids(input.content(), cfg.vocab_size)?;
            e
        }
        None => {
            owned = embed(params, input)?;
            &owned
        }
    };

    let m = target.true_len();
    if m == 0 || m > cfg.max_output_len {
        return Err(Error::ShapeMismatch {
            op: "forward",
            expected: format!("1..={} target tokens", cfg.max_output_len),
            found: m.to_string(),
        });
    }
    check_ids(target.content(), cfg.vocab_size)?;

    let x = emb.rows.top_rows(emb.len);
    let (encoder_out, encoder, encoder_norm) = run_encoder(params, &x);

    let targets = target.content().to_vec();
    let mut decoder_ids = Vec::with_capacity(m);
    decoder_ids.push(special::BOS);
    decoder_ids.extend_from_slice(&targets[..m - 1]);
    let (decoder_out, decoder, decoder_norm) = run_decoder(params, &decoder_ids, &encoder_out);
    let logits = project(params, &decoder_out);

    let mut loss = F::zero();
    let mut probs = Mat::zeros(m, cfg.vocab_size);
    for (i, &t) in targets.iter().enumerate() {
        let lp = log_softmax_row(logits.row(i));
        loss -= lp[t as usize];
        for (p, &l) in probs.row_mut(i).iter_mut().zip(&lp) {
            *p = l.exp();
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: None,
            example: 0,
        });
    }

    Ok(ForwardTrace {
        params,
        loss,
        logits,
        encoder_out: encoder_out.clone(),
        cache: Some(Cache {
            input_ids: input.content().to_vec(),
            decoder_ids,
            targets,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            decoder_out,
            probs,
        }),
    })
}

impl<F: Float> ForwardTrace<'_, F> {
    /// Gradients of `self.loss`. A trace supports exactly one backward pass.
    pub fn backward(&mut self) -> Result<Gradients<F>> {
        let mut grads = self.params.zeros_like();
        let embedding = self.backward_into(&mut grads, F::one())?;
        Ok(Gradients {
            params: grads,
            embedding,
        })
    }

    /// Adds `weight * dL/dθ` into `grads` and returns the unweighted
    /// embedding gradient.
    pub fn backward_into(&mut self, grads: &mut Params<F>, weight: F) -> Result<Mat<F>> {
        let c = self.cache.take().ok_or(Error::TraceConsumed)?;
        let p = self.params;
        let cfg = &p.config;

        let mut dlogits = c.probs;
        for (i, &t) in c.targets.iter().enumerate() {
            let v = dlogits.get(i, t as usize);
            dlogits.set(i, t as usize, v - F::one());
        }
        dlogits.scale(weight);

        c.decoder_out.t_matmul_acc(&dlogits, &mut grads.out_w);
        dlogits.sum_rows_into(&mut grads.out_b);
        let dhidden = dlogits.matmul_t(&p.out_w);

        let mut dy = layer_norm_backward(&p.decoder_norm, &c.decoder_norm, &dhidden, &mut grads.decoder_norm);
        let mut dmemory = Mat::zeros(self.encoder_out.rows(), cfg.hidden);
        for ((l, lc), lg) in p.decoder.iter().zip(&c.decoder).zip(grads.decoder.iter_mut()).rev() {
            dy = decoder_layer_backward(l, lc, &dy, lg, &mut dmemory);
        }
        for (i, &id) in c.decoder_ids.iter().enumerate() {
            add_row(&mut grads.token_embed, id as usize, dy.row(i));
            add_row(&mut grads.decoder_pos, i, dy.row(i));
        }

        let mut dx = layer_norm_backward(&p.encoder_norm, &c.encoder_norm, &dmemory, &mut grads.encoder_norm);
        for ((l, lc), lg) in p.encoder.iter().zip(&c.encoder).zip(grads.encoder.iter_mut()).rev() {
            dx = encoder_layer_backward(l, lc, &dx, lg);
        }
        for (i, &id) in c.input_ids.iter().enumerate() {
            add_row(&mut grads.token_embed, id as usize, dx.row(i));
            add_row(&mut grads.encoder_pos, i, dx.row(i));
        }

        let mut embedding = Mat::zeros(cfg.max_input_len, cfg.hidden);
        let inv = F::one() / weight;
        for i in 0..dx.rows() {
            for (e, &d) in embedding.row_mut(i).iter_mut().zip(dx.row(i)) {
                *e = if weight == F::zero() { F::zero() } else { d * inv };
            }
        }
        Ok(embedding)
    }

    pub fn is_consumed(&self) -> bool {
        self.cache.is_none()
    }
}

fn add_row<F: Float>(m: &mut Mat<F>, r: usize, src: &[F]) {
    for (d, &s) in m.row_mut(r).iter_mut().zip(src) {
        *d += s;
    }
}

/// Mean-loss forward and backward over a batch.
pub struct BatchPass<F> {
    /// Mean of per-example losses.
    pub loss: F,
    pub losses: Vec<F>,
    /// Gradient of the mean loss.
    pub param_grad: Params<F>,
    /// Per-example gradient of each example's own loss w.r.t. its embeddings.
    pub embedding_grads: Vec<Mat<F>>,
}

/// Examples per reduction shard. Shards are reduced in index order, so the
/// result does not depend on the number of worker threads.
const SHARD: usize = 4;

/// Summed parameter gradient and per-example (loss, embedding gradient).
type Shard<F> = (Params<F>, Vec<(F, Mat<F>)>);

pub fn batch_pass<F: Float>(
    params: &Params<F>,
    examples: &[Example],
    overrides: Option<&[EmbeddingSeq<F>]>,
    batch_id: Option<usize>,
) -> Result<BatchPass<F>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("batch"));
    }
    if let Some(o) = overrides {
        if o.len() != examples.len() {
            return Err(Error::ShapeMismatch {
                op: "batch_pass",
                expected: format!("{} override sequences", examples.len()),
                found: o.len().to_string(),
            });
        }
    }
    let weight = F::one() / F::of(examples.len() as f64);
    let shards: Vec<Result<Shard<F>>> = examples
        .par_chunks(SHARD)
        .enumerate()
        .map(|(s, chunk)| {
            let mut grads = params.zeros_like();
            let mut out = Vec::with_capacity(chunk.len());
            for (j, ex) in chunk.iter().enumerate() {
                let idx = s * SHARD + j;
                let ov = overrides.map(|o| &o[idx]);
                let mut trace = forward(params, &ex.input, &ex.target, ov).map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                        batch: batch_id,
                        example: idx,
                    },
                    other => other,
                })?;
                let emb = trace.backward_into(&mut grads, weight)?;
                out.push((trace.loss, emb));
            }
            Ok((grads, out))
        })
        .collect();

    let mut param_grad: Option<Params<F>> = None;
    let mut losses = Vec::with_capacity(examples.len());
    let mut embedding_grads = Vec::with_capacity(examples.len());
    for shard in shards {
        let (g, items) = shard?;
        match &mut param_grad {
            Some(acc) => acc.add_assign(&g),
            None => param_grad = Some(g),
        }
        for (l, e) in items {
            losses.push(l);
            embedding_grads.push(e);
        }
    }
    let loss = losses.iter().copied().sum::<F>() * weight;
    Ok(BatchPass {
        loss,
        losses,
        param_grad: param_grad.expect("non-empty batch"),
        embedding_grads,
    })
}

/// Mean loss without gradients.
pub fn batch_loss<F: Float>(
    params: &Params<F>,
    examples: &[Example],
    overrides: Option<&[EmbeddingSeq<F>]>,
) -> Result<F> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("batch"));
    }
    let losses: Vec<Result<F>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            forward(params, &ex.input, &ex.target, overrides.map(|o| &o[i]))
                .map(|t| t.loss)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                        batch: None,
                        example: i,
                    },
                    other => other,
                })
        })
        .collect();
    let mut sum = F::zero();
    for l in losses {
        sum += l?;
    }
    Ok(sum / F::of(examples.len() as f64))
}

/// Encoder states for inference.
pub fn encode_source<F: Float>(params: &Params<F>, input: &TokenSeq) -> Result<Mat<F>> {
    let emb = embed(params, input)?;
    Ok(run_encoder(params, &emb.rows.top_rows(emb.len)).0)
}

/// Log-probabilities of the next output token after `prefix` (which does not
/// include the begin token).
pub fn next_token_log_probs<F: Float>(params: &Params<F>, memory: &Mat<F>, prefix: &[u32]) -> Result<Vec<F>> {
    if prefix.len() + 1 > params.config.max_output_len {
        return Err(Error::ShapeMismatch {
            op: "decode",
            expected: format!("prefix shorter than {}", params.config.max_output_len),
            found: prefix.len().to_string(),
        });
    }
    check_ids(prefix, params.config.vocab_size)?;
    let mut ids = Vec::with_capacity(prefix.len() + 1);
    ids.push(special::BOS);
    ids.extend_from_slice(prefix);
    let (out, _, _) = run_decoder(params, &ids, memory);
    let last = out.top_rows(out.rows()).row(out.rows() - 1).to_vec();
    let logits = project(params, &Mat::from_vec(1, last.len(), last));
    Ok(log_softmax_row(logits.row(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelConfig;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab_size: 12,
            max_input_len: 7,
            max_output_len: 5,
            seed: 3,
        }
    }

    fn seq(ids: &[u32], max: usize) -> TokenSeq {
        TokenSeq::new(ids, max)
    }

    #[test]
    fn uniform_logits_give_log_vocab_per_token() {
        let cfg = ModelConfig {
            vocab_size: 4,
            ..tiny()
        };
        let mut p = Params::<f64>::init(&cfg).unwrap();
        p.out_w.fill(0.0);
        p.out_b.fill(0.0);
        let t = forward(&p, &seq(&[3, 2], 7), &seq(&[3, 2], 5), None).unwrap();
        assert!((t.loss - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((t.loss - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn certain_model_has_zero_loss() {
        let mut p = Params::<f64>::init(&tiny()).unwrap();
        p.out_w.fill(0.0);
        p.out_b.fill(0.0);
        p.out_b.set(0, 7, 1000.0);
        let t = forward(&p, &seq(&[5, 6], 7), &seq(&[7, 7, 7], 5), None).unwrap();
        assert_eq!(t.loss, 0.0);
    }

    #[test]
    fn override_with_true_embeddings_is_bitwise_identical() {
        let p = Params::<f32>::init(&tiny()).unwrap();
        let input = seq(&[5, 9, 3, 4], 7);
        let target = seq(&[6, 2], 5);
        let plain = forward(&p, &input, &target, None).unwrap();
        let emb = embed(&p, &input).unwrap();
        let over = forward(&p, &input, &target, Some(&emb)).unwrap();
        assert_eq!(plain.loss.to_bits(), over.loss.to_bits());
        assert_eq!(plain.logits, over.logits);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let p = Params::<f64>::init(&tiny()).unwrap();
        let mut t = forward(&p, &seq(&[5, 6], 7), &seq(&[7, 2], 5), None).unwrap();
        assert!(t.backward().is_ok());
        assert!(t.is_consumed());
        assert!(matches!(t.backward(), Err(Error::TraceConsumed)));
    }

    #[test]
    fn pad_rows_get_zero_embedding_gradient() {
        let p = Params::<f64>::init(&tiny()).unwrap();
        let mut t = forward(&p, &seq(&[5, 6, 8], 7), &seq(&[7, 2], 5), None).unwrap();
        let g = t.backward().unwrap();
        for r in 3..7 {
            assert!(g.embedding.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(g.embedding.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pads_never_change_the_loss() {
        let p = Params::<f64>::init(&tiny()).unwrap();
        let a = forward(&p, &seq(&[5, 6], 3), &seq(&[7, 2], 2), None).unwrap();
        let b = forward(&p, &seq(&[5, 6], 7), &seq(&[7, 2], 5), None).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn zero_step_leaves_loss_unchanged() {
        let p = Params::<f64>::init(&tiny()).unwrap();
        let input = seq(&[5, 6, 9], 7);
        let target = seq(&[7, 8, 2], 5);
        let mut t = forward(&p, &input, &target, None).unwrap();
        let g = t.backward().unwrap();
        let mut q = p.clone();
        q.axpy(0.0, &g.params);
        assert_eq!(forward(&q, &input, &target, None).unwrap().loss, t.loss);
    }

    #[test]
    fn decoder_is_causal() {
        let p = Params::<f64>::init(&tiny()).unwrap();
        let input = seq(&[5, 6, 9], 7);
        let base = forward(&p, &input, &seq(&[7, 8, 9, 2], 5), None).unwrap();
        // changing target position 2 only affects decoder inputs from 3 on
        let changed = forward(&p, &input, &seq(&[7, 8, 11, 2], 5), None).unwrap();
        for r in 0..=2 {
            assert_eq!(base.logits.row(r), changed.logits.row(r));
        }
        assert_ne!(base.logits.row(3), changed.logits.row(3));
    }

    #[test]
    fn zeroed_sub_blocks_pass_input_through() {
        let mut p = Params::<f64>::init(&tiny()).unwrap();
        for l in &mut p.encoder {
            l.attn.wo.fill(0.0);
            l.ffn.w2.fill(0.0);
            l.ffn.b2.fill(0.0);
        }
        let x = Mat::from_vec(3, 8, (0..24).map(|v| v as f64 * 0.1).collect());
        let (out, _) = encoder_layer_forward(&p.encoder[0], &x, 2);
        assert_eq!(out, x);
    }

    #[test]
    fn batch_pass_matches_single_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::<f64>::init(&tiny()).unwrap();
        p.randomize(&mut rng, 0.1);
        let exs: Vec<Example> = (0..6)
            .map(|i| Example {
                input: seq(&[5 + i % 3, 6, 7 + i % 4], 7),
                target: seq(&[8, 9 - i % 2, 2], 5),
            })
            .collect();
        let b = batch_pass(&p, &exs, None, Some(0)).unwrap();
        let mut expect = p.zeros_like();
        let mut loss = 0.0;
        for ex in &exs {
            let mut t = forward(&p, &ex.input, &ex.target, None).unwrap();
            loss += t.loss;
            expect.axpy(1.0 / 6.0, &t.backward().unwrap().params);
        }
        assert!((b.loss - loss / 6.0).abs() < 1e-12);
        for (a, e) in b.param_grad.tensors().iter().zip(expect.tensors()) {
            for (x, y) in a.data().iter().zip(e.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!((batch_loss(&p, &exs, None).unwrap() - b.loss).abs() < 1e-12);
    }

    #[test]
    fn next_token_matches_teacher_forced_logits() {
        let p = Params::<f64>::init(&tiny()).unwrap();
        let input = seq(&[5, 6, 9], 7);
        let t = forward(&p, &input, &seq(&[7, 8, 2], 5), None).unwrap();
        let mem = encode_source(&p, &input).unwrap();
        let lp = next_token_log_probs(&p, &mem, &[7, 8]).unwrap();
        let expect = log_softmax_row(t.logits.row(2));
        for (a, b) in lp.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
