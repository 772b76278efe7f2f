//! Question encoding: tokenizer, token vocabulary, a GRU recurrence over
//! trainable embeddings, and instruction initialization by dynamic token
//! attention.

use std::collections::HashMap;
use std::path::Path;

use crate::tensor::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::rng::DetRng;
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Lowercase the text and split into alphanumeric/underscore runs; every
/// other non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() || ch == '_' {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    if tokens.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    Ok(tokens)
}

/// Token string ↔ id table with reserved PAD/UNK at ids 0/1.
#[derive(Clone, Debug)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenVocab {
    pub fn new() -> Self {
        let mut v = TokenVocab { tokens: Vec::new(), index: HashMap::new() };
        v.push("<pad>");
        v.push("<unk>");
        v
    }

    fn push(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    /// Build from a corpus, adding tokens in first-occurrence order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = TokenVocab::new();
        for text in texts {
            for tok in tokenize(text)? {
                v.push(&tok);
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD/UNK always present
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Tokenize and map to ids, UNK for out-of-vocabulary tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(tokenize(text)?.iter().map(|t| self.id(t)).collect())
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for line in text.lines() {
            tokens.push(line.to_string());
        }
        if tokens.len() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>" {
            return Err(Error::Data("vocabulary file must start with <pad>, <unk>".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(TokenVocab { tokens, index })
    }

    pub fn sha256_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        use std::fmt::Write as _;
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

impl Default for TokenVocab {
    fn default() -> Self {
        TokenVocab::new()
    }
}

/// Uniform init on ±sqrt(6/(fan_in+fan_out)).
pub fn glorot(rng: &mut DetRng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_symmetric(limit)).collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

pub fn glorot_vec(rng: &mut DetRng, n: usize) -> Tensor {
    let limit = (6.0 / (n + 1) as f64).sqrt();
    Tensor::vector((0..n).map(|_| rng.uniform_symmetric(limit)).collect())
}

/// GRU cell parameters registered in a `ParamStore`. Weight matrices are
/// stored (hidden × input)/(hidden × hidden) and applied via matvec.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut DetRng,
    ) -> Self {
        let mut mat = |name: &str, rows: usize, cols: usize| {
            store.register(&format!("{prefix}.{name}"), glorot(rng, rows, cols))
        };
        let w_z = mat("w_z", hidden_dim, input_dim);
        let u_z = mat("u_z", hidden_dim, hidden_dim);
        let w_r = mat("w_r", hidden_dim, input_dim);
        let u_r = mat("u_r", hidden_dim, hidden_dim);
        let w_n = mat("w_n", hidden_dim, input_dim);
        let u_n = mat("u_n", hidden_dim, hidden_dim);
        let b_z = store.register(&format!("{prefix}.b_z"), Tensor::zeros(vec![hidden_dim]));
        let b_r = store.register(&format!("{prefix}.b_r"), Tensor::zeros(vec![hidden_dim]));
        let b_n = store.register(&format!("{prefix}.b_n"), Tensor::zeros(vec![hidden_dim]));
        GruCell { w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n, input_dim, hidden_dim }
    }

    /// z = σ(W_z x + U_z h + b_z)
    pub fn update_gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let wz = tape.param(store, self.w_z)?;
        let uz = tape.param(store, self.u_z)?;
        let bz = tape.param(store, self.b_z)?;
        let wx = tape.matvec(wz, x)?;
        let uh = tape.matvec(uz, h)?;
        let s = tape.add(wx, uh)?;
        let s = tape.add(s, bz)?;
        tape.sigmoid(s)
    }

    /// One recurrence step: h' = (1−z)⊙n + z⊙h with reset-gated candidate n.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let z = self.update_gate(tape, store, x, h)?;

        let wr = tape.param(store, self.w_r)?;
        let ur = tape.param(store, self.u_r)?;
        let br = tape.param(store, self.b_r)?;
        let rx = tape.matvec(wr, x)?;
        let rh = tape.matvec(ur, h)?;
        let r = tape.add(rx, rh)?;
        let r = tape.add(r, br)?;
        let r = tape.sigmoid(r)?;

        let wn = tape.param(store, self.w_n)?;
        let un = tape.param(store, self.u_n)?;
        let bn = tape.param(store, self.b_n)?;
        let nx = tape.matvec(wn, x)?;
        let nh = tape.matvec(un, h)?;
        let gated = tape.hadamard(r, nh)?;
        let n = tape.add(nx, gated)?;
        let n = tape.add(n, bn)?;
        let n = tape.tanh(n)?;

        let ones = tape.constant(Tensor::vector(vec![1.0; self.hidden_dim]))?;
        let one_minus_z = tape.sub(ones, z)?;
        let a = tape.hadamard(one_minus_z, n)?;
        let b = tape.hadamard(z, h)?;
        tape.add(a, b)
    }
}

/// Per-token representations plus the question vector.
pub struct EncodedQuestion {
    /// |tokens| × d matrix of recurrent hidden states (one row per token).
    pub b: NodeId,
    /// Final hidden state.
    pub q: NodeId,
    /// True on real tokens (always all-true here; questions are not padded).
    pub mask: Vec<bool>,
}

/// Run the recurrence over the token embeddings. B stacks the per-token
/// hidden states; q is the final one.
pub fn encode_question(
    tape: &mut Tape,
    store: &ParamStore,
    embed: ParamId,
    gru: &GruCell,
    token_ids: &[u32],
) -> Result<EncodedQuestion> {
    if token_ids.is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let table = tape.param(store, embed)?;
    let mut h = tape.constant(Tensor::vector(vec![0.0; gru.hidden_dim]))?;
    let mut rows = Vec::with_capacity(token_ids.len());
    for &tid in token_ids {
        let x = tape.row(table, tid as usize)?;
        h = gru.step(tape, store, x, h)?;
        rows.push(h);
    }
    let b = tape.stack_rows(&rows)?;
    Ok(EncodedQuestion { b, q: h, mask: vec![true; token_ids.len()] })
}

/// Attention/projection parameters for instruction initialization: one d×4d
/// projection per instruction slot plus the shared token-score vector.
#[derive(Clone, Debug)]
pub struct InstructionParams {
    pub w_inst: Vec<ParamId>,
    pub w_u: ParamId,
    pub d: usize,
}

impl InstructionParams {
    pub fn register(store: &mut ParamStore, k: usize, d: usize, rng: &mut DetRng) -> Self {
        let w_inst = (0..k)
            .map(|i| store.register(&format!("inst.w_{i}"), glorot(rng, d, 4 * d)))
            .collect();
        let w_u = store.register("inst.w_u", glorot_vec(rng, d));
        InstructionParams { w_inst, w_u, d }
    }
}

/// K instruction vectors with their token-attention weights.
pub struct InstructionSet {
    pub vectors: Vec<NodeId>,
    /// Per-instruction attention over tokens, snapshotted at initialization.
    pub attention: Vec<Vec<f64>>,
}

/// Initialize K instructions by iterated token attention. Starting from
/// i⁰ = q, slot k forms a query from (i, q, q⊙i, q−i), scores each token by
/// w_u·(query ⊙ b_j), and takes the attention-weighted token sum.
pub fn init_instructions(
    tape: &mut Tape,
    store: &ParamStore,
    params: &InstructionParams,
    enc: &EncodedQuestion,
    k: usize,
) -> Result<InstructionSet> {
    if k == 0 {
        return Err(Error::Config("instruction count must be at least 1".into()));
    }
    if params.w_inst.len() < k {
        return Err(Error::Config(format!(
            "{} instruction projections registered, {k} requested",
            params.w_inst.len()
        )));
    }
    let w_u = tape.param(store, params.w_u)?;
    let mut prev = enc.q;
    let mut vectors = Vec::with_capacity(k);
    let mut attention = Vec::with_capacity(k);
    for slot in 0..k {
        let w = tape.param(store, params.w_inst[slot])?;
        let qi = tape.hadamard(enc.q, prev)?;
        let q_minus = tape.sub(enc.q, prev)?;
        let cat = tape.concat_vec(&[prev, enc.q, qi, q_minus])?;
        let query = tape.matvec(w, cat)?;
        let keyed = tape.scale_cols(enc.b, query)?;
        let scores = tape.matvec(keyed, w_u)?;
        let u = tape.masked_softmax(scores, &enc.mask)?;
        let inst = tape.vecmat(u, enc.b)?;
        attention.push(tape.value(u).data().to_vec());
        vectors.push(inst);
        prev = inst;
    }
    Ok(InstructionSet { vectors, attention })
}
