//! Greedy autoregressive generation, with and without a key/value cache.

use ndarray::{Array2, ArrayView2, Axis};

use super::{DecoderInput, DecoderMode, Heads, ImageMemory, Model};
use crate::error::{Error, Result};
use crate::tensor::{kernels, AttnLayout, Float, Graph};
use crate::vocab::{TaskFilter, TokenId};

/// Cached decoder activations for one sequence.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    self_k: Vec<Array2<T>>,
    self_v: Vec<Array2<T>>,
    cross_k: Vec<Array2<T>>,
    cross_v: Vec<Array2<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct ArOutput {
    /// Generated body tokens (prompt excluded).
    pub tokens: Vec<TokenId>,
    /// Per generated position, the filtered distribution it was drawn from.
    pub probs: Array2<f32>,
}

fn argmax_filtered<T: Float>(row: ndarray::ArrayView1<'_, T>, filter: &TaskFilter) -> TokenId {
    let mut best = filter.ids()[0];
    for &id in filter.ids() {
        if row[id as usize] > row[best as usize] {
            best = id;
        }
    }
    best
}

impl<T: Float> Model<T> {
    fn w(&self, name: &str) -> ArrayView2<'_, T> {
        self.params.by_name(name).expect("parameter registered at construction").view()
    }

    fn eager_linear(&self, x: ArrayView2<'_, T>, name: &str) -> Array2<T> {
        kernels::linear(x, self.w(&format!("{name}.weight")), self.w(&format!("{name}.bias")))
    }

    fn eager_norm(&self, x: ArrayView2<'_, T>, name: &str) -> Array2<T> {
        kernels::layer_norm(x, self.w(&format!("{name}.gamma")), self.w(&format!("{name}.beta"))).0
    }

    fn eager_residual(&self, x: Array2<T>, delta: Array2<T>) -> Array2<T> {
        if self.config.residual {
            x + delta
        } else {
            delta
        }
    }

    /// An empty cache with the cross-attention keys/values of `memory`
    /// precomputed.
    pub fn kv_cache(&self, memory: &ImageMemory<T>) -> KvCache<T> {
        let d = self.config.embed_dim;
        let mem = self.eager_norm(memory.tokens.view(), "dec.mem_norm");
        let pos = super::position_encoding_2d::<T>(memory.grid.0, memory.grid.1, d);
        let keys_in = &mem + &pos;
        let mut cache = KvCache { self_k: vec![], self_v: vec![], cross_k: vec![], cross_v: vec![], len: 0 };
        for l in 0..self.config.dec_layers {
            cache.cross_k.push(self.eager_linear(keys_in.view(), &format!("dec.{l}.cross.k")));
            cache.cross_v.push(self.eager_linear(mem.view(), &format!("dec.{l}.cross.v")));
            cache.self_k.push(Array2::zeros((0, d)));
            cache.self_v.push(Array2::zeros((0, d)));
        }
        cache
    }

    /// Feeds `tokens` at the next positions, grows the cache by
    /// `tokens.len()`, and returns the last position's logits. Counts one
    /// decoder pass.
    pub fn ar_step(&self, cache: &mut KvCache<T>, tokens: &[TokenId]) -> Result<Array2<T>> {
        let cfg = &self.config;
        let past = cache.len;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Shape("ar_step needs at least one token".into()));
        }
        if past + n > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: past + n, max: cfg.max_seq_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        self.counters.add_decoder_pass();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos = self.w("dec.pos_embed").slice(ndarray::s![past..past + n, ..]).to_owned();
        let mut x = self.w("dec.tok_embed").select(Axis(0), &ids) + &pos;
        let s = cache.cross_k.first().map_or(0, |k| k.nrows());
        for l in 0..cfg.dec_layers {
            let name = |rest: &str| format!("dec.{l}.{rest}");
            let h = self.eager_norm(x.view(), &name("ln1"));
            let hp = &h + &pos;
            let q = self.eager_linear(hp.view(), &name("self.q"));
            let k = self.eager_linear(hp.view(), &name("self.k"));
            let v = self.eager_linear(hp.view(), &name("self.v"));
            cache.self_k[l].append(Axis(0), k.view()).expect("matching widths");
            cache.self_v[l].append(Axis(0), v.view()).expect("matching widths");
            let layout = AttnLayout {
                heads: cfg.num_heads,
                q_len: n,
                k_len: past + n,
                kv_block: vec![0],
                causal: true,
                q_offset: past,
            };
            let (a, _) = kernels::attention_forward(q.view(), cache.self_k[l].view(), cache.self_v[l].view(), &layout, false);
            let a = self.eager_linear(a.view(), &name("self.o"));
            x = self.eager_residual(x, a);

            let h = self.eager_norm(x.view(), &name("ln2"));
            let hp = &h + &pos;
            let q = self.eager_linear(hp.view(), &name("cross.q"));
            let layout = AttnLayout::cross(cfg.num_heads, n, s, vec![0]);
            let (a, _) = kernels::attention_forward(q.view(), cache.cross_k[l].view(), cache.cross_v[l].view(), &layout, false);
            let a = self.eager_linear(a.view(), &name("cross.o"));
            x = self.eager_residual(x, a);

            let h = self.eager_norm(x.view(), &name("ln3"));
            let f = self.eager_linear(h.view(), &name("ffn.fc1")).mapv(kernels::gelu);
            let f = self.eager_linear(f.view(), &name("ffn.fc2"));
            x = self.eager_residual(x, f);
        }
        cache.len += n;
        let last = x.slice(ndarray::s![n - 1..n, ..]);
        let normed = self.eager_norm(last, "dec.out_norm");
        Ok(self.eager_linear(normed.view(), "dec.head"))
    }

    /// Greedy generation of `body_len` tokens after `prompt` using the KV
    /// cache: exactly `body_len` decoder passes, no early stop.
    pub fn ar_generate(&self, memory: &ImageMemory<T>, prompt: &[TokenId], body_len: usize, filter: &TaskFilter) -> Result<ArOutput> {
        self.check_prompt(prompt, body_len)?;
        let mut cache = self.kv_cache(memory);
        let mut tokens = Vec::with_capacity(body_len);
        let mut probs = Array2::<f32>::zeros((body_len, self.config.vocab_size));
        let mut feed: Vec<TokenId> = prompt.to_vec();
        for i in 0..body_len {
            let logits = self.ar_step(&mut cache, &feed)?;
            let next = argmax_filtered(logits.row(0), filter);
            probs.row_mut(i).assign(&kernels::filtered_softmax(logits.view(), filter.ids()).row(0));
            tokens.push(next);
            feed = vec![next];
        }
        Ok(ArOutput { tokens, probs })
    }

    /// Reference generation that re-runs the full causal decoder on the
    /// whole prefix at every step.
    pub fn ar_generate_uncached(
        &self,
        memory: &ImageMemory<T>,
        prompt: &[TokenId],
        body_len: usize,
        filter: &TaskFilter,
    ) -> Result<ArOutput> {
        self.check_prompt(prompt, body_len)?;
        let mut seq = prompt.to_vec();
        let mut probs = Array2::<f32>::zeros((body_len, self.config.vocab_size));
        for i in 0..body_len {
            let mut g = Graph::inference(&self.params);
            let mem = memory.to_graph(&mut g);
            let input = DecoderInput { tokens: &seq, seq_len: seq.len(), mem_index: &[0] };
            let logits = self.decoder_forward(&mut g, &mem, input, DecoderMode::Causal, &[seq.len() - 1], Heads::Last)?;
            let row = g.value(logits[0]);
            let next = argmax_filtered(row.row(0), filter);
            probs.row_mut(i).assign(&kernels::filtered_softmax(row.view(), filter.ids()).row(0));
            seq.push(next);
        }
        Ok(ArOutput { tokens: seq.split_off(prompt.len()), probs })
    }

    fn check_prompt(&self, prompt: &[TokenId], body_len: usize) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::Shape("generation needs a non-empty prompt".into()));
        }
        // The last generated token is never fed back.
        let needed = prompt.len() + body_len.saturating_sub(1);
        if needed > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: needed, max: self.config.max_seq_len });
        }
        Ok(())
    }
}
