use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{TokenId, Vocab, BOS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParameterStore, Tensor, Var};

use super::bias::{check_coords, sequence_index, table_index};
use super::config::ModelConfig;
use super::layout::{Coord, Layout};

#[derive(Clone, Debug)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    enc_rel: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec_rel: ParamId,
    tau_row: ParamId,
    tau_row0: ParamId,
    tau_col: ParamId,
    lambda: ParamId,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    lm_head: ParamId,
    count_w: ParamId,
    count_b: ParamId,
}

/// Initialisation recipe of a parameter.
#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Builds the parameter store, either fresh (drawing values) or by looking
/// names up in an existing store.
struct Registrar<'a> {
    store: &'a mut ParameterStore,
    rng: Option<ChaCha8Rng>,
}

impl Registrar<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        let Some(rng) = self.rng.as_mut() else {
            let id = self.store.id(&name)?;
            if self.store.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    self.store.value(id).shape()
                )));
            }
            return Ok(id);
        };
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn norm(&mut self, p: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.add(format!("{p}.g"), &[d], Init::Ones)?,
            b: self.add(format!("{p}.b"), &[d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, p: &str, d: usize, out_std: f64) -> Result<Attn> {
        let s = 1.0 / (d as f64).sqrt();
        Ok(Attn {
            q: self.add(format!("{p}.q"), &[d, d], Init::Normal(s))?,
            k: self.add(format!("{p}.k"), &[d, d], Init::Normal(s))?,
            v: self.add(format!("{p}.v"), &[d, d], Init::Normal(s))?,
            o: self.add(format!("{p}.o"), &[d, d], Init::Normal(out_std))?,
        })
    }

    fn ff(&mut self, p: &str, d: usize, dff: usize, out_scale: f64) -> Result<FeedForward> {
        Ok(FeedForward {
            w1: self.add(format!("{p}.w1"), &[d, dff], Init::Normal(1.0 / (d as f64).sqrt()))?,
            b1: self.add(format!("{p}.b1"), &[dff], Init::Zeros)?,
            w2: self.add(
                format!("{p}.w2"),
                &[dff, d],
                Init::Normal(out_scale / (dff as f64).sqrt()),
            )?,
            b2: self.add(format!("{p}.b2"), &[d], Init::Zeros)?,
        })
    }
}

/// Encoder-decoder transformer over serialized table templates.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    ids: Ids,
}

impl Model {
    /// A freshly initialised model. Bias tables and the count head start at 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let ids = Self::register(
            &config,
            &mut Registrar {
                store: &mut store,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        )?;
        Ok(Model { config, store, ids })
    }

    /// Wraps an existing store, checking that every parameter is present.
    pub fn from_store(config: ModelConfig, mut store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let ids = Self::register(
            &config,
            &mut Registrar {
                store: &mut store,
                rng: None,
            },
        )?;
        if store.len() != count_params(&config) {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Model { config, store, ids })
    }

    fn register(c: &ModelConfig, r: &mut Registrar) -> Result<Ids> {
        let (d, h, v) = (c.d_model, c.n_heads, c.vocab_size);
        let enc_out = 1.0 / ((d * 2 * c.n_enc_layers.max(1)) as f64).sqrt();
        let dec_out = 1.0 / ((d * 3 * c.n_dec_layers.max(1)) as f64).sqrt();
        let embed = r.add("embed".into(), &[v, d], Init::Normal(1.0))?;
        let bias_init = if c.bias_init_std > 0.0 {
            Init::Normal(c.bias_init_std)
        } else {
            Init::Zeros
        };
        let enc_rel = r.add("enc.rel_bias".into(), &[h, c.rel_buckets], bias_init)?;
        let mut enc = Vec::new();
        for i in 0..c.n_enc_layers {
            let p = format!("enc.{i}");
            enc.push(EncLayer {
                ln1: r.norm(&format!("{p}.ln1"), d)?,
                attn: r.attn(&format!("{p}.attn"), d, enc_out)?,
                ln2: r.norm(&format!("{p}.ln2"), d)?,
                ff: r.ff(&format!("{p}.ff"), d, c.d_ff, (d as f64).sqrt() * enc_out)?,
            });
        }
        let enc_ln = r.norm("enc.ln_f", d)?;
        let dec_rel = r.add("dec.rel_bias".into(), &[h, c.rel_buckets], bias_init)?;
        let tau_row = r.add("dec.tau_row".into(), &[h, 2 * c.max_rows + 1], bias_init)?;
        let tau_row0 = r.add("dec.tau_row0".into(), &[h, 1], bias_init)?;
        let tau_col = r.add("dec.tau_col".into(), &[h, 2 * c.max_cols + 1], bias_init)?;
        let lambda = r.add("dec.lambda".into(), &[h, 2 * c.max_cell_len + 1], bias_init)?;
        let mut dec = Vec::new();
        for i in 0..c.n_dec_layers {
            let p = format!("dec.{i}");
            dec.push(DecLayer {
                ln1: r.norm(&format!("{p}.ln1"), d)?,
                self_attn: r.attn(&format!("{p}.self"), d, dec_out)?,
                ln2: r.norm(&format!("{p}.ln2"), d)?,
                cross: r.attn(&format!("{p}.cross"), d, dec_out)?,
                ln3: r.norm(&format!("{p}.ln3"), d)?,
                ff: r.ff(&format!("{p}.ff"), d, c.d_ff, (d as f64).sqrt() * dec_out)?,
            });
        }
        let dec_ln = r.norm("dec.ln_f", d)?;
        let lm_head = r.add("lm_head".into(), &[d, v], Init::Normal(1.0 / (d as f64).sqrt()))?;
        let count_w = r.add("count.w".into(), &[d, 1], Init::Zeros)?;
        let count_b = r.add("count.b".into(), &[1], Init::Zeros)?;
        Ok(Ids {
            embed,
            enc_rel,
            enc,
            enc_ln,
            dec_rel,
            tau_row,
            tau_row0,
            tau_col,
            lambda,
            dec,
            dec_ln,
            lm_head,
            count_w,
            count_b,
        })
    }

    /// `[BOS] + tokens(text)`, checked against the input length limit.
    pub fn source_ids(&self, vocab: &Vocab, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(text));
        if ids.len() > self.config.max_input_len {
            return Err(Error::Layout(format!(
                "input of {} tokens exceeds max_input_len {}",
                ids.len(),
                self.config.max_input_len
            )));
        }
        Ok(ids)
    }

    /// A graph matching the configured float width.
    pub fn graph(&self, train: bool) -> Graph {
        let g = if train { Graph::new() } else { Graph::inference() };
        g.with_width(self.config.float_width)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = g.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        g.mul_const(x, Arc::new(mask))
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId) -> Result<Var> {
        let w = g.param(&self.store, w);
        g.matmul(x, w)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let gamma = g.param(&self.store, n.g);
        let beta = g.param(&self.store, n.b);
        g.layer_norm(x, gamma, beta)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, f: &FeedForward) -> Result<Var> {
        let h = self.linear(g, x, f.w1)?;
        let b1 = g.param(&self.store, f.b1);
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let o = self.linear(g, h, f.w2)?;
        let b2 = g.param(&self.store, f.b2);
        g.add_row(o, b2)
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: Var,
        mem: Var,
        a: &Attn,
        bias: Option<Var>,
        visible: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.linear(g, x, a.q)?;
        let k = self.linear(g, mem, a.k)?;
        let v = self.linear(g, mem, a.v)?;
        let o = g.attention(q, k, v, self.config.n_heads, bias, visible)?;
        self.linear(g, o, a.o)
    }

    /// Encoder memory `[len, d_model]`. Dropout is active iff `rng` is given.
    pub fn encode(&self, g: &mut Graph, src: &[TokenId], mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if src.is_empty() || src.len() > self.config.max_input_len {
            return Err(Error::Layout(format!(
                "encoder input length {} outside 1..={}",
                src.len(),
                self.config.max_input_len
            )));
        }
        let table = g.param(&self.store, self.ids.embed);
        let mut x = g.embedding(table, src)?;
        x = self.dropout(g, x, &mut rng)?;
        let rel = g.param(&self.store, self.ids.enc_rel);
        let bias = g.gather(rel, sequence_index(src.len(), &self.config), src.len(), src.len())?;
        for layer in &self.ids.enc {
            let h = self.norm(g, x, &layer.ln1)?;
            let h = self.attention(g, h, h, &layer.attn, Some(bias), None)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &layer.ln2)?;
            let h = self.feed_forward(g, h, &layer.ff)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, &self.ids.enc_ln)
    }

    /// Group-count regression from the first memory vector, `[1, 1]`.
    pub fn count_head(&self, g: &mut Graph, memory: Var) -> Result<Var> {
        let first = g.select_rows(memory, &[0])?;
        let y = self.linear(g, first, self.ids.count_w)?;
        let b = g.param(&self.store, self.ids.count_b);
        g.add_row(y, b)
    }

    /// Sum of the sequence-relative, table-structure and local biases,
    /// `[heads, len, len]`.
    pub fn decoder_bias(&self, g: &mut Graph, coords: &[Coord]) -> Result<Var> {
        let (beta, tau, lambda) = self.decoder_bias_terms(g, coords)?;
        let s = g.add(beta, tau)?;
        g.add(s, lambda)
    }

    /// β, τ and λ separately, each `[heads, len, len]`.
    pub fn decoder_bias_terms(&self, g: &mut Graph, coords: &[Coord]) -> Result<(Var, Var, Var)> {
        let n = coords.len();
        let ix = table_index(coords, &self.config)?;
        let rel = g.param(&self.store, self.ids.dec_rel);
        let beta = g.gather(rel, sequence_index(n, &self.config), n, n)?;
        let row = g.param(&self.store, self.ids.tau_row);
        let row = g.gather(row, ix.row, n, n)?;
        let row0 = g.param(&self.store, self.ids.tau_row0);
        let row0 = g.gather(row0, ix.row0, n, n)?;
        let col = g.param(&self.store, self.ids.tau_col);
        let col = g.gather(col, ix.col, n, n)?;
        let tau = g.add(row, row0)?;
        let tau = g.add(tau, col)?;
        let lam = g.param(&self.store, self.ids.lambda);
        let lambda = g.gather(lam, ix.local, n, n)?;
        Ok((beta, tau, lambda))
    }

    /// Final decoder states `[layout.len(), d_model]`.
    pub fn decode(&self, g: &mut Graph, memory: Var, layout: &Layout, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        check_coords(&layout.coords, &self.config)?;
        if layout.n_cols() > self.config.max_cols || layout.slot_len() != self.config.max_cell_len {
            return Err(Error::Layout(format!(
                "layout with {} columns and slot length {} does not fit the model",
                layout.n_cols(),
                layout.slot_len()
            )));
        }
        let visible = layout.visibility();
        let bias = self.decoder_bias(g, &layout.coords)?;
        let table = g.param(&self.store, self.ids.embed);
        let mut x = g.embedding(table, &layout.tokens)?;
        x = self.dropout(g, x, &mut rng)?;
        for layer in &self.ids.dec {
            let h = self.norm(g, x, &layer.ln1)?;
            let h = self.attention(g, h, h, &layer.self_attn, Some(bias), Some(&visible))?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &layer.ln2)?;
            let h = self.attention(g, h, memory, &layer.cross, None, None)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &layer.ln3)?;
            let h = self.feed_forward(g, h, &layer.ff)?;
            let h = self.dropout(g, h, &mut rng)?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, &self.ids.dec_ln)
    }

    /// Vocabulary logits `[positions.len(), vocab]` at the given positions.
    pub fn logits(&self, g: &mut Graph, hidden: Var, positions: &[usize]) -> Result<Var> {
        let h = g.select_rows(hidden, positions)?;
        self.linear(g, h, self.ids.lm_head)
    }

    /// Eval-mode encoder memory.
    pub fn memory(&self, src: &[TokenId]) -> Result<Arc<Tensor>> {
        let mut g = self.graph(false);
        let m = self.encode(&mut g, src, None)?;
        Ok(g.shared_value(m))
    }

    /// Eval-mode row-count prediction (unrounded).
    pub fn predict_count(&self, memory: &Arc<Tensor>) -> Result<f64> {
        let mut g = self.graph(false);
        let m = g.constant(Arc::clone(memory));
        let y = self.count_head(&mut g, m)?;
        Ok(g.value(y).item())
    }

    /// Eval-mode raw logits at `positions` of `layout`, one row per position.
    pub fn position_logits(&self, memory: &Arc<Tensor>, layout: &Layout, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = self.graph(false);
        let m = g.constant(Arc::clone(memory));
        let h = self.decode(&mut g, m, layout, None)?;
        let l = self.logits(&mut g, h, positions)?;
        let v = g.value(l);
        Ok((0..positions.len()).map(|i| v.row(i).to_vec()).collect())
    }
}

/// Number of named parameter arrays of a config.
fn count_params(c: &ModelConfig) -> usize {
    // embed, enc rel, enc ln_f(2), dec rel, tau(3), lambda, dec ln_f(2), lm_head, count(2)
    14 + c.n_enc_layers * (2 + 4 + 2 + 4) + c.n_dec_layers * (2 + 4 + 2 + 4 + 2 + 4)
}

/// Row count from the regression output: `max(0, round_half_up(y))`, capped.
pub fn rows_from_count(y: f64, max_rows: usize) -> usize {
    if !y.is_finite() {
        return 0;
    }
    let r = (y + 0.5).floor().max(0.0);
    (r as usize).min(max_rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_rows: 3,
            max_cols: 3,
            ..ModelConfig::new(20)
        }
    }

    #[test]
    fn registers_expected_parameter_count() {
        let m = Model::new(tiny(), 0).unwrap();
        assert_eq!(m.store.len(), count_params(&m.config));
        let again = Model::from_store(m.config.clone(), m.store.clone()).unwrap();
        assert_eq!(again.store.len(), m.store.len());
    }

    #[test]
    fn single_bos_memory_shape() {
        let m = Model::new(tiny(), 1).unwrap();
        let mem = m.memory(&[BOS]).unwrap();
        assert_eq!(mem.shape(), &[1, 8]);
        assert_eq!(m.memory(&[BOS]).unwrap(), mem);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let m = Model::new(tiny(), 1).unwrap();
        assert!(matches!(m.memory(&[BOS, 99]), Err(Error::UnknownToken { id: 99, .. })));
    }

    #[test]
    fn untrained_count_head_is_zero() {
        let m = Model::new(tiny(), 2).unwrap();
        for src in [vec![BOS], vec![BOS, 10, 11, 12]] {
            assert_eq!(m.predict_count(&m.memory(&src).unwrap()).unwrap(), 0.0);
        }
    }

    #[test]
    fn rounding_contract() {
        assert_eq!(rows_from_count(2.4, 8), 2);
        assert_eq!(rows_from_count(2.5, 8), 3);
        assert_eq!(rows_from_count(-1.3, 8), 0);
        assert_eq!(rows_from_count(42.0, 8), 8);
        assert_eq!(rows_from_count(f64::NAN, 8), 0);
    }
}
