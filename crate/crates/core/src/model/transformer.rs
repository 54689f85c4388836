//! Pre-layer-norm encoder–decoder transformer built on [`crate::autograd`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{ParamInfo, ParamStore, ParameterRegistry, Region};
use crate::autograd::{DropoutCtx, Gradients, Graph, Var};
use crate::data::vocab::PAD;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Rectangular batch of token rows, right-padded with [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    rows: usize,
    len: usize,
}

impl TokenBatch {
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Result<Self> {
        let len = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        if rows.is_empty() || len == 0 {
            return Err(Error::Input("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            let r = r.as_ref();
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        }
        Ok(Self {
            ids,
            rows: rows.len(),
            len,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    /// Number of non-pad tokens.
    pub fn tokens(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }
}

struct Declarations {
    infos: Vec<ParamInfo>,
    d: usize,
    f: usize,
}

impl Declarations {
    fn add(&mut self, name: String, shape: Vec<usize>, region: Region, maskable: bool) {
        self.infos.push(ParamInfo { name, shape, region, maskable });
    }

    fn norm(&mut self, p: &str, region: Region) {
        self.add(format!("{p}.gain"), vec![self.d], region, false);
        self.add(format!("{p}.bias"), vec![self.d], region, false);
    }

    fn attention(&mut self, p: &str, region: Region) {
        for proj in ["q", "k", "v", "o"] {
            self.add(format!("{p}.{proj}.weight"), vec![self.d, self.d], region, true);
            self.add(format!("{p}.{proj}.bias"), vec![self.d], region, false);
        }
    }

    fn ffn(&mut self, p: &str, region: Region) {
        let (d, f) = (self.d, self.f);
        self.add(format!("{p}.w1"), vec![d, f], region, true);
        self.add(format!("{p}.b1"), vec![f], region, false);
        self.add(format!("{p}.w2"), vec![f, d], region, true);
        self.add(format!("{p}.b2"), vec![d], region, false);
    }
}

/// Declared shapes, regions and maskability for `config`, without allocating values.
pub fn build_registry(config: &ModelConfig) -> Result<ParameterRegistry> {
    config.validate()?;
    let (v, d) = (config.vocab_size, config.d_model);
    let mut decl = Declarations { infos: Vec::new(), d, f: config.ffn_dim };

    let enc = Region::Encoder;
    decl.add("enc.embed".into(), vec![v, d], enc, true);
    for l in 0..config.n_enc_layers {
        decl.norm(&format!("enc.{l}.ln1"), enc);
        decl.attention(&format!("enc.{l}.self_attn"), enc);
        decl.norm(&format!("enc.{l}.ln2"), enc);
        decl.ffn(&format!("enc.{l}.ffn"), enc);
    }
    decl.norm("enc.final_ln", enc);

    let dec = Region::Decoder;
    decl.add("dec.embed".into(), vec![v, d], dec, true);
    for l in 0..config.n_dec_layers {
        decl.norm(&format!("dec.{l}.ln1"), dec);
        decl.attention(&format!("dec.{l}.self_attn"), dec);
        decl.norm(&format!("dec.{l}.ln2"), dec);
        decl.attention(&format!("dec.{l}.cross_attn"), dec);
        decl.norm(&format!("dec.{l}.ln3"), dec);
        decl.ffn(&format!("dec.{l}.ffn"), dec);
    }
    decl.norm("dec.final_ln", dec);
    if !config.tie_embeddings {
        decl.add("out.weight".into(), vec![d, v], dec, true);
    }
    decl.add("out.bias".into(), vec![v], dec, false);
    ParameterRegistry::new(decl.infos)
}

/// Builds the registry and initialises all parameters from `seed`.
///
/// Each tensor draws from its own stream keyed by `(seed, name)`. Weight
/// matrices use Glorot-uniform with gain √2 in front of the ReLU and 1
/// elsewhere; embeddings are uniform with variance `1/d_model`; norm gains
/// start at 1 and every bias at 0.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(ParamStore, ParameterRegistry)> {
    let registry = build_registry(config)?;
    let mut store = ParamStore::new();
    for info in registry.iter() {
        let n = info.numel();
        let name = info.name.as_str();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if !info.maskable {
            vec![0.0; n]
        } else {
            let bound = if name.ends_with("embed") {
                (3.0 / config.d_model as f64).sqrt()
            } else {
                let gain: f64 = if name.ends_with("ffn.w1") { 2f64.sqrt() } else { 1.0 };
                gain * (6.0 / (info.shape[0] + info.shape[1]) as f64).sqrt()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        store.insert(name, Tensor::new(info.shape.clone(), data)?);
    }
    Ok((store, registry))
}

/// Encoder output plus what the decoder needs to mask padded source keys.
pub struct Encoded {
    memory: Var,
    src_pad: Vec<bool>,
    batch: usize,
    src_len: usize,
}

/// A computation graph bound to one parameter store.
pub struct ModelGraph<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    config: &'a ModelConfig,
    vars: HashMap<String, Var>,
    track_grads: bool,
}

impl<'a> ModelGraph<'a> {
    /// `dropout = None` gives deterministic evaluation-mode behaviour.
    pub fn new(params: &'a ParamStore, config: &'a ModelConfig, dropout: Option<DropoutCtx>, track_grads: bool) -> Self {
        let graph = match dropout {
            Some(ctx) => Graph::with_dropout(ctx),
            None => Graph::new(),
        };
        Self {
            graph,
            params,
            config,
            vars: HashMap::new(),
            track_grads,
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?.clone();
        let v = self.graph.leaf(t, self.track_grads, Some(name.to_string()))?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, weight: &str, bias: &str) -> Result<Var> {
        let w = self.p(weight)?;
        let b = self.p(bias)?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, g, b, LN_EPS)
    }

    fn embed(&mut self, table: &str, tokens: &TokenBatch, site: &str) -> Result<Var> {
        let d = self.config.d_model;
        if tokens.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        let t = self.p(table)?;
        let x = self.graph.gather(t, tokens.ids())?;
        let x = self.graph.scale(x, (d as f64).sqrt())?;
        let pe = positional_encoding(tokens.rows(), tokens.len(), d);
        let x = self.graph.add_const(x, &pe)?;
        self.graph.dropout(x, self.config.dropout, site)
    }

    /// Multi-head attention of `q_in: [B·Tq, d]` over `kv_in: [B·Tk, d]`.
    #[allow(clippy::too_many_arguments)]
    fn attention(&mut self, prefix: &str, q_in: Var, kv_in: Var, batch: usize, tq: usize, tk: usize, mask: &Tensor) -> Result<Var> {
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let dh = d / h;
        let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
            let x = g.reshape(x, &[batch, t, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[batch * h, t, dh])
        };
        let q = self.linear(q_in, &format!("{prefix}.q.weight"), &format!("{prefix}.q.bias"))?;
        let k = self.linear(kv_in, &format!("{prefix}.k.weight"), &format!("{prefix}.k.bias"))?;
        let v = self.linear(kv_in, &format!("{prefix}.v.weight"), &format!("{prefix}.v.bias"))?;
        let q = split(&mut self.graph, q, tq)?;
        let k = split(&mut self.graph, k, tk)?;
        let v = split(&mut self.graph, v, tk)?;
        let scores = self.graph.bmm(q, k, true)?;
        let scores = self.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = self.graph.add_const(scores, mask)?;
        let probs = self.graph.softmax(scores, 2)?;
        let ctx = self.graph.bmm(probs, v, false)?;
        let ctx = self.graph.reshape(ctx, &[batch, h, tq, dh])?;
        let ctx = self.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.graph.reshape(ctx, &[batch * tq, d])?;
        self.linear(ctx, &format!("{prefix}.o.weight"), &format!("{prefix}.o.bias"))
    }

    fn feed_forward(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let hdn = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let hdn = self.graph.relu(hdn)?;
        self.linear(hdn, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&mut self, x: Var, y: Var, site: &str) -> Result<Var> {
        let y = self.graph.dropout(y, self.config.dropout, site)?;
        self.graph.add(x, y)
    }

    pub fn encode(&mut self, src: &TokenBatch) -> Result<Encoded> {
        let (b, s) = (src.rows(), src.len());
        let src_pad: Vec<bool> = src.ids().iter().map(|&t| t == PAD).collect();
        let mask = attention_mask(b, self.config.n_heads, s, s, |bi, _, j| src_pad[bi * s + j]);
        let mut x = self.embed("enc.embed", src, "enc.embed")?;
        for l in 0..self.config.n_enc_layers {
            let h = self.norm(x, &format!("enc.{l}.ln1"))?;
            let h = self.attention(&format!("enc.{l}.self_attn"), h, h, b, s, s, &mask)?;
            x = self.residual(x, h, &format!("enc.{l}.self_attn"))?;
            let h = self.norm(x, &format!("enc.{l}.ln2"))?;
            let h = self.feed_forward(&format!("enc.{l}.ffn"), h)?;
            x = self.residual(x, h, &format!("enc.{l}.ffn"))?;
        }
        let memory = self.norm(x, "enc.final_ln")?;
        Ok(Encoded {
            memory,
            src_pad,
            batch: b,
            src_len: s,
        })
    }

    /// Logits `[B, T, vocab]` for decoder input `tgt_in`.
    pub fn decode(&mut self, enc: &Encoded, tgt_in: &TokenBatch) -> Result<Var> {
        let (b, t, s) = (tgt_in.rows(), tgt_in.len(), enc.src_len);
        if b != enc.batch {
            return Err(Error::Shape(format!("source batch {} vs target batch {b}", enc.batch)));
        }
        let h_count = self.config.n_heads;
        let causal = attention_mask(b, h_count, t, t, |_, i, j| j > i);
        let cross = attention_mask(b, h_count, t, s, |bi, _, j| enc.src_pad[bi * s + j]);
        let mut x = self.embed("dec.embed", tgt_in, "dec.embed")?;
        for l in 0..self.config.n_dec_layers {
            let h = self.norm(x, &format!("dec.{l}.ln1"))?;
            let h = self.attention(&format!("dec.{l}.self_attn"), h, h, b, t, t, &causal)?;
            x = self.residual(x, h, &format!("dec.{l}.self_attn"))?;
            let h = self.norm(x, &format!("dec.{l}.ln2"))?;
            let h = self.attention(&format!("dec.{l}.cross_attn"), h, enc.memory, b, t, s, &cross)?;
            x = self.residual(x, h, &format!("dec.{l}.cross_attn"))?;
            let h = self.norm(x, &format!("dec.{l}.ln3"))?;
            let h = self.feed_forward(&format!("dec.{l}.ffn"), h)?;
            x = self.residual(x, h, &format!("dec.{l}.ffn"))?;
        }
        let x = self.norm(x, "dec.final_ln")?;
        let logits = if self.config.tie_embeddings {
            let e = self.p("dec.embed")?;
            let w = self.graph.permute(e, &[1, 0])?;
            let y = self.graph.matmul(x, w)?;
            let bias = self.p("out.bias")?;
            self.graph.add_row(y, bias)?
        } else {
            self.linear(x, "out.weight", "out.bias")?
        };
        self.graph.reshape(logits, &[b, t, self.config.vocab_size])
    }
}

/// Additive attention mask `[B·H, Tq, Tk]`; `masked(b, i, j)` hides key `j` from query `i`.
fn attention_mask(batch: usize, heads: usize, tq: usize, tk: usize, masked: impl Fn(usize, usize, usize) -> bool) -> Tensor {
    let mut data = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        let mut block = Vec::with_capacity(tq * tk);
        for i in 0..tq {
            for j in 0..tk {
                block.push(if masked(b, i, j) { MASKED } else { 0.0 });
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&block);
        }
    }
    Tensor::new(vec![batch * heads, tq, tk], data).expect("mask shape")
}

/// Sinusoidal position table repeated over `rows` sequences: `[rows·len, d]`.
fn positional_encoding(rows: usize, len: usize, d: usize) -> Tensor {
    let mut one = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            one.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    let mut data = Vec::with_capacity(rows * len * d);
    for _ in 0..rows {
        data.extend_from_slice(&one);
    }
    Tensor::new(vec![rows * len, d], data).expect("pe shape")
}

fn check_tokens(config: &ModelConfig, batch: &TokenBatch) -> Result<()> {
    match batch.ids().iter().find(|&&t| t >= config.vocab_size) {
        Some(bad) => Err(Error::Input(format!("token id {bad} out of range for vocabulary {}", config.vocab_size))),
        None => Ok(()),
    }
}

/// Logits `[batch, tgt_len, vocab]`. `dropout = None` is evaluation mode.
pub fn forward(params: &ParamStore, config: &ModelConfig, src: &TokenBatch, tgt_in: &TokenBatch, dropout: Option<DropoutCtx>) -> Result<Tensor> {
    check_tokens(config, src)?;
    check_tokens(config, tgt_in)?;
    let mut mg = ModelGraph::new(params, config, dropout, false);
    let enc = mg.encode(src)?;
    let logits = mg.decode(&enc, tgt_in)?;
    Ok(mg.graph.value(logits).clone())
}

/// Teacher-forced cross-entropy and gradients for every parameter.
pub fn loss_and_grads(
    params: &ParamStore,
    config: &ModelConfig,
    src: &TokenBatch,
    tgt_in: &TokenBatch,
    tgt_out: &TokenBatch,
    dropout: Option<DropoutCtx>,
) -> Result<(f64, Gradients)> {
    check_tokens(config, src)?;
    check_tokens(config, tgt_in)?;
    check_tokens(config, tgt_out)?;
    if tgt_in.rows() != tgt_out.rows() || tgt_in.len() != tgt_out.len() {
        return Err(Error::Shape("decoder input and output batches differ in shape".into()));
    }
    let mut mg = ModelGraph::new(params, config, dropout, true);
    let enc = mg.encode(src)?;
    let logits = mg.decode(&enc, tgt_in)?;
    let loss = mg.graph.cross_entropy(logits, tgt_out.ids(), PAD)?;
    let value = mg.graph.value(loss).data()[0];
    let grads = mg.graph.backward(loss)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[usize]]) -> TokenBatch {
        TokenBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn registry_tags_regions_and_maskability() {
        let reg = build_registry(&ModelConfig::mini()).unwrap();
        for p in reg.iter() {
            let expect = if p.name.starts_with("enc.") { Region::Encoder } else { Region::Decoder };
            assert_eq!(p.region, expect, "{}", p.name);
            let is_matrix = p.shape.len() == 2;
            assert_eq!(p.maskable, is_matrix, "{}", p.name);
        }
        let enc = reg.iter().filter(|p| p.region == Region::Encoder).count();
        let dec = reg.iter().filter(|p| p.region == Region::Decoder).count();
        assert_eq!(enc + dec, reg.len());
    }

    #[test]
    fn mini_param_count_matches_analytic_formula() {
        let c = ModelConfig::mini();
        let (store, reg) = build_model(&c, 1).unwrap();
        let (v, d, f) = (c.vocab_size, c.d_model, c.ffn_dim);
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        let enc_layer = attn + ffn + 2 * ln;
        let dec_layer = 2 * attn + ffn + 3 * ln;
        let expected = v * d + c.n_enc_layers * enc_layer + ln + v * d + c.n_dec_layers * dec_layer + ln + d * v + v;
        assert_eq!(store.numel(), expected);
        reg.check_store(&store).unwrap();
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = ModelConfig::mini();
        let (a, _) = build_model(&c, 9).unwrap();
        let (b, _) = build_model(&c, 9).unwrap();
        let (other, _) = build_model(&c, 10).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn tied_embeddings_drop_the_output_matrix() {
        let mut c = ModelConfig::mini();
        c.tie_embeddings = true;
        let (store, reg) = build_model(&c, 1).unwrap();
        assert!(reg.get("out.weight").is_none());
        let logits = forward(&store, &c, &batch(&[&[5, 6]]), &batch(&[&[1]]), None).unwrap();
        assert_eq!(logits.shape(), &[1, 1, c.vocab_size]);
    }

    #[test]
    fn logits_shape_and_eval_determinism() {
        let c = ModelConfig::mini();
        let (store, _) = build_model(&c, 3).unwrap();
        let src = batch(&[&[5, 6, 7], &[8, 9]]);
        let tgt = batch(&[&[1], &[1]]);
        let a = forward(&store, &c, &src, &tgt, None).unwrap();
        assert_eq!(a.shape(), &[2, 1, c.vocab_size]);
        let b = forward(&store, &c, &src, &tgt, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_token_is_input_error() {
        let c = ModelConfig::mini();
        let (store, _) = build_model(&c, 3).unwrap();
        let r = forward(&store, &c, &batch(&[&[5, 99]]), &batch(&[&[1]]), None);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let c = ModelConfig::mini();
        let (store, _) = build_model(&c, 4).unwrap();
        let rows_src: [&[usize]; 3] = [&[5, 6, 7, 8], &[9, 10], &[11, 12, 13]];
        let rows_tgt: [&[usize]; 3] = [&[1, 8, 7], &[1, 10, 9], &[1, 13]];
        let a = forward(&store, &c, &batch(&rows_src), &batch(&rows_tgt), None).unwrap();
        let perm = [2, 0, 1];
        let ps: Vec<&[usize]> = perm.iter().map(|&i| rows_src[i]).collect();
        let pt: Vec<&[usize]> = perm.iter().map(|&i| rows_tgt[i]).collect();
        let b = forward(&store, &c, &batch(&ps), &batch(&pt), None).unwrap();
        let (t, v) = (3, c.vocab_size);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for pos in 0..rows_tgt[old_row].len() {
                let ao = &a.data()[(old_row * t + pos) * v..(old_row * t + pos + 1) * v];
                let bo = &b.data()[(new_row * t + pos) * v..(new_row * t + pos + 1) * v];
                assert_eq!(ao, bo, "row {old_row} pos {pos}");
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let c = ModelConfig::mini();
        let (store, _) = build_model(&c, 5).unwrap();
        let src = batch(&[&[5, 6, 7]]);
        let a = forward(&store, &c, &src, &batch(&[&[1, 7, 6, 5]]), None).unwrap();
        let b = forward(&store, &c, &src, &batch(&[&[1, 7, 20, 21]]), None).unwrap();
        let v = c.vocab_size;
        assert_eq!(&a.data()[..2 * v], &b.data()[..2 * v]);
        assert_ne!(&a.data()[2 * v..3 * v], &b.data()[2 * v..3 * v]);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let c = ModelConfig::mini();
        let (store, _) = build_model(&c, 6).unwrap();
        let src = batch(&[&[5, 6, 7]]);
        let tgt = batch(&[&[1, 7]]);
        let eval = forward(&store, &c, &src, &tgt, None).unwrap();
        let ctx = DropoutCtx { seed: 1, step: 1 };
        let t1 = forward(&store, &c, &src, &tgt, Some(ctx)).unwrap();
        let t2 = forward(&store, &c, &src, &tgt, Some(ctx)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, eval);
    }
}
