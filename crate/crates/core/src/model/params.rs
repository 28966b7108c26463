use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use crate::error::{Error, Result};
use crate::float::Float;

/// Shape and seed of an encoder-decoder model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            hidden: 128,
            heads: 4,
            ffn: 256,
            vocab_size: 8000,
            max_input_len: 48,
            max_output_len: 16,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Twelve 768-wide layers on each side, the size of a base pre-trained
    /// code model. Expressible, but far too slow for CPU training here.
    pub fn base_scale(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 12,
            decoder_layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return bad("hidden, heads and ffn must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.max_input_len == 0 || self.max_output_len == 0 {
            return bad("sequence lengths must be >= 1".into());
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab size {} is too small", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<F> {
    pub scale: Mat<F>,
    pub offset: Mat<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F> {
    pub wq: Mat<F>,
    pub wk: Mat<F>,
    pub wv: Mat<F>,
    pub wo: Mat<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<F> {
    pub w1: Mat<F>,
    pub b1: Mat<F>,
    pub w2: Mat<F>,
    pub b2: Mat<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<F> {
    pub attn_norm: LayerNormParams<F>,
    pub attn: AttentionParams<F>,
    pub ffn_norm: LayerNormParams<F>,
    pub ffn: FfnParams<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<F> {
    pub self_norm: LayerNormParams<F>,
    pub self_attn: AttentionParams<F>,
    pub cross_norm: LayerNormParams<F>,
    pub cross_attn: AttentionParams<F>,
    pub ffn_norm: LayerNormParams<F>,
    pub ffn: FfnParams<F>,
}

/// All trainable tensors. The same type doubles as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    pub config: ModelConfig,
    pub token_embed: Mat<F>,
    pub encoder_pos: Mat<F>,
    pub decoder_pos: Mat<F>,
    pub encoder: Vec<EncoderLayer<F>>,
    pub encoder_norm: LayerNormParams<F>,
    pub decoder: Vec<DecoderLayer<F>>,
    pub decoder_norm: LayerNormParams<F>,
    pub out_w: Mat<F>,
    pub out_b: Mat<F>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier<F: Float>(&mut self, rows: usize, cols: usize) -> Mat<F> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let data = (0..rows * cols)
            .map(|_| F::of(dist.sample(&mut self.rng)))
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    fn normal<F: Float>(&mut self, rows: usize, cols: usize, std: f64) -> Mat<F> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols)
            .map(|_| F::of(dist.sample(&mut self.rng)))
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    fn norm<F: Float>(&self, h: usize) -> LayerNormParams<F> {
        LayerNormParams {
            scale: Mat::filled(1, h, F::one()),
            offset: Mat::zeros(1, h),
        }
    }

    fn attn<F: Float>(&mut self, h: usize) -> AttentionParams<F> {
        AttentionParams {
            wq: self.xavier(h, h),
            wk: self.xavier(h, h),
            wv: self.xavier(h, h),
            wo: self.xavier(h, h),
        }
    }

    fn ffn<F: Float>(&mut self, h: usize, inner: usize) -> FfnParams<F> {
        FfnParams {
            w1: self.xavier(h, inner),
            b1: Mat::zeros(1, inner),
            w2: self.xavier(inner, h),
            b2: Mat::zeros(1, h),
        }
    }
}

impl<F: Float> Params<F> {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let h = config.hidden;
        let token_embed = init.normal(config.vocab_size, h, 0.1);
        let encoder_pos = init.normal(config.max_input_len, h, 0.1);
        let decoder_pos = init.normal(config.max_output_len, h, 0.1);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayer {
                attn_norm: init.norm(h),
                attn: init.attn(h),
                ffn_norm: init.norm(h),
                ffn: init.ffn(h, config.ffn),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer {
                self_norm: init.norm(h),
                self_attn: init.attn(h),
                cross_norm: init.norm(h),
                cross_attn: init.attn(h),
                ffn_norm: init.norm(h),
                ffn: init.ffn(h, config.ffn),
            })
            .collect();
        let out_w = init.xavier(h, config.vocab_size);
        Ok(Self {
            config: config.clone(),
            token_embed,
            encoder_pos,
            decoder_pos,
            encoder,
            encoder_norm: init.norm(h),
            decoder,
            decoder_norm: init.norm(h),
            out_w,
            out_b: Mat::zeros(1, config.vocab_size),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    /// Tensors in declaration order; checkpoints and optimizers rely on it.
    pub fn tensors(&self) -> Vec<&Mat<F>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut out: Vec<(String, &Mat<F>)> = vec![
            ("token_embed".into(), &self.token_embed),
            ("encoder_pos".into(), &self.encoder_pos),
            ("decoder_pos".into(), &self.decoder_pos),
        ];
        fn norm<'a, F>(out: &mut Vec<(String, &'a Mat<F>)>, p: &str, n: &'a LayerNormParams<F>) {
            out.push((format!("{p}.scale"), &n.scale));
            out.push((format!("{p}.offset"), &n.offset));
        }
        fn attn<'a, F>(out: &mut Vec<(String, &'a Mat<F>)>, p: &str, a: &'a AttentionParams<F>) {
            out.push((format!("{p}.wq"), &a.wq));
            out.push((format!("{p}.wk"), &a.wk));
            out.push((format!("{p}.wv"), &a.wv));
            out.push((format!("{p}.wo"), &a.wo));
        }
        fn ffn<'a, F>(out: &mut Vec<(String, &'a Mat<F>)>, p: &str, f: &'a FfnParams<F>) {
            out.push((format!("{p}.w1"), &f.w1));
            out.push((format!("{p}.b1"), &f.b1));
            out.push((format!("{p}.w2"), &f.w2));
            out.push((format!("{p}.b2"), &f.b2));
        }
        for (i, l) in self.encoder.iter().enumerate() {
            norm(&mut out, &format!("encoder.{i}.attn_norm"), &l.attn_norm);
            attn(&mut out, &format!("encoder.{i}.attn"), &l.attn);
            norm(&mut out, &format!("encoder.{i}.ffn_norm"), &l.ffn_norm);
            ffn(&mut out, &format!("encoder.{i}.ffn"), &l.ffn);
        }
        norm(&mut out, "encoder_norm", &self.encoder_norm);
        for (i, l) in self.decoder.iter().enumerate() {
            norm(&mut out, &format!("decoder.{i}.self_norm"), &l.self_norm);
            attn(&mut out, &format!("decoder.{i}.self_attn"), &l.self_attn);
            norm(&mut out, &format!("decoder.{i}.cross_norm"), &l.cross_norm);
            attn(&mut out, &format!("decoder.{i}.cross_attn"), &l.cross_attn);
            norm(&mut out, &format!("decoder.{i}.ffn_norm"), &l.ffn_norm);
            ffn(&mut out, &format!("decoder.{i}.ffn"), &l.ffn);
        }
        norm(&mut out, "decoder_norm", &self.decoder_norm);
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<F>> {
        let mut out: Vec<&mut Mat<F>> = vec![
            &mut self.token_embed,
            &mut self.encoder_pos,
            &mut self.decoder_pos,
        ];
        fn norm<'a, F>(out: &mut Vec<&'a mut Mat<F>>, n: &'a mut LayerNormParams<F>) {
            out.push(&mut n.scale);
            out.push(&mut n.offset);
        }
        fn attn<'a, F>(out: &mut Vec<&'a mut Mat<F>>, a: &'a mut AttentionParams<F>) {
            out.push(&mut a.wq);
            out.push(&mut a.wk);
            out.push(&mut a.wv);
            out.push(&mut a.wo);
        }
        fn ffn<'a, F>(out: &mut Vec<&'a mut Mat<F>>, f: &'a mut FfnParams<F>) {
            out.push(&mut f.w1);
            out.push(&mut f.b1);
            out.push(&mut f.w2);
            out.push(&mut f.b2);
        }
        for l in &mut self.encoder {
            norm(&mut out, &mut l.attn_norm);
            attn(&mut out, &mut l.attn);
            norm(&mut out, &mut l.ffn_norm);
            ffn(&mut out, &mut l.ffn);
        }
        norm(&mut out, &mut self.encoder_norm);
        for l in &mut self.decoder {
            norm(&mut out, &mut l.self_norm);
            attn(&mut out, &mut l.self_attn);
            norm(&mut out, &mut l.cross_norm);
            attn(&mut out, &mut l.cross_attn);
            norm(&mut out, &mut l.ffn_norm);
            ffn(&mut out, &mut l.ffn);
        }
        norm(&mut out, &mut self.decoder_norm);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn axpy(&mut self, alpha: F, other: &Params<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn global_l2_norm(&self) -> F {
        self.tensors()
            .iter()
            .map(|t| t.sum_sq())
            .sum::<F>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        let mut out = Params::<G>::init(&self.config).expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Mean of several same-shaped parameter sets, summed in slice order.
    pub fn mean_of(items: &[Params<F>]) -> Option<Params<F>> {
        let (first, rest) = items.split_first()?;
        let mut acc = first.clone();
        for g in rest {
            acc.add_assign(g);
        }
        acc.scale(F::one() / F::of(items.len() as f64));
        Some(acc)
    }

    /// Randomize every tensor, including norms and biases. Used to make
    /// gradient checks exercise non-trivial values everywhere.
    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        let dist = Uniform::new_inclusive(-scale, scale);
        for t in self.tensors_mut() {
            for x in t.data_mut() {
                *x += F::of(dist.sample(rng));
            }
        }
    }
}
