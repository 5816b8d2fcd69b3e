//! Text side of the scorer: token embedding, fixed-length sequence
//! preparation, bidirectional LSTM encoding with peephole gates, softmax
//! word attention pooling, and the attention-free attribute encoder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::attributes::{AttributeCategory, AttributeSet};
use crate::autodiff::{AutodiffError, Tape, Tensor, TensorId};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("attention over an empty (fully padded) sequence")]
    EmptySequence,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    BadFile {
        path: String,
        line: usize,
        message: String,
    },
}

/// Lowercases and splits on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// Token-to-index map; index 0 is reserved for the padding/unknown token
/// and every out-of-vocabulary token maps there.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        v.add(UNK_TOKEN);
        v
    }

    /// Inserts a token if absent; returns its index either way.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// One token per line; the line number is the index.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 && line != UNK_TOKEN {
                return Err(TextError::BadFile {
                    path: path.display().to_string(),
                    line: 1,
                    message: format!("first token must be {UNK_TOKEN}, got {line:?}"),
                });
            }
            tokens.push(line);
        }
        if tokens.is_empty() {
            return Err(TextError::BadFile {
                path: path.display().to_string(),
                line: 0,
                message: "empty vocabulary file".to_string(),
            });
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { index, tokens })
    }
}

/// V x k embedding matrix. Without a pretrained file the rows are drawn
/// uniform in [-0.08, 0.08].
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn random<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            weights: Tensor::uniform(vec![vocab_size, dim], 0.08, rng),
            trainable: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape[0]
    }
}

/// Reads a text embedding file: one token per line, then its components
/// separated by whitespace. If the file does not start with the unknown
/// token, a zero row is prepended for it.
pub fn load_embeddings(path: &Path) -> Result<(Vocabulary, EmbeddingTable), TextError> {
    let reader = BufReader::new(File::open(path)?);
    let mut vocab = Vocabulary::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or_else(|| TextError::BadFile {
            path: path.display().to_string(),
            line: lineno + 1,
            message: "missing token".to_string(),
        })?;
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TextError::BadFile {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("bad float: {e}"),
            })?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(TextError::BadFile {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("expected {d} components, got {}", values.len()),
                })
            }
            _ => {}
        }
        if token == UNK_TOKEN && lineno == 0 {
            rows.insert(0, values);
        } else {
            vocab.add(token);
            rows.push(values);
        }
    }
    let dim = dim.ok_or_else(|| TextError::BadFile {
        path: path.display().to_string(),
        line: 0,
        message: "empty embedding file".to_string(),
    })?;
    if rows.len() < vocab.len() {
        rows.insert(0, vec![0.0; dim]); // synthesized <unk> row
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let weights = Tensor::from_vec(data, vec![vocab.len(), dim], true)
        .map_err(AutodiffError::from)
        .map_err(TextError::Autodiff)?;
    Ok((
        vocab,
        EmbeddingTable {
            weights,
            trainable: true,
        },
    ))
}

pub fn save_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Result<(), TextError> {
    let mut w = BufWriter::new(File::create(path)?);
    let k = table.dim();
    for i in 0..vocab.len() {
        write!(w, "{}", vocab.token(i))?;
        for v in &table.weights.data[i * k..(i + 1) * k] {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Truncates to the first `n` tokens or right-pads with the unknown index;
/// also returns the true (unpadded) length.
pub fn prepare_sequence(tokens: &[String], vocab: &Vocabulary, n: usize) -> (Vec<usize>, usize) {
    assert!(n >= 1, "sequence length must be >= 1");
    let true_len = tokens.len().min(n);
    let mut indices: Vec<usize> = tokens.iter().take(n).map(|t| vocab.lookup(t)).collect();
    indices.resize(n, 0);
    (indices, true_len)
}

// ── BLSTM ───────────────────────────────────────────────────────────

/// One direction's LSTM cell. Peephole weights (`w_ci`, `w_cf`, `w_co`)
/// are diagonal and stored as H-vectors multiplying the cell state
/// elementwise.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_ci: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_cf: Tensor,
    pub b_f: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub w_co: Tensor,
    pub b_o: Tensor,
}

pub const LSTM_FIELD_NAMES: [&str; 15] = [
    "w_xi", "w_hi", "w_ci", "b_i", "w_xf", "w_hf", "w_cf", "b_f", "w_xc", "w_hc", "b_c", "w_xo",
    "w_ho", "w_co", "b_o",
];

#[derive(Debug, Clone, Copy)]
pub struct LstmCellIds {
    pub w_xi: TensorId,
    pub w_hi: TensorId,
    pub w_ci: TensorId,
    pub b_i: TensorId,
    pub w_xf: TensorId,
    pub w_hf: TensorId,
    pub w_cf: TensorId,
    pub b_f: TensorId,
    pub w_xc: TensorId,
    pub w_hc: TensorId,
    pub b_c: TensorId,
    pub w_xo: TensorId,
    pub w_ho: TensorId,
    pub w_co: TensorId,
    pub b_o: TensorId,
}

impl LstmCellParams {
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = 1.0 / (input_dim as f64).sqrt();
        let wh = 1.0 / (hidden as f64).sqrt();
        let mat_x = |rng: &mut R| Tensor::uniform(vec![hidden, input_dim], wx, rng);
        let mat_h = |rng: &mut R| Tensor::uniform(vec![hidden, hidden], wh, rng);
        let peep = |rng: &mut R| Tensor::uniform(vec![hidden], wh, rng);
        LstmCellParams {
            w_xi: mat_x(rng),
            w_hi: mat_h(rng),
            w_ci: peep(rng),
            b_i: Tensor::zeros(vec![hidden], true),
            w_xf: mat_x(rng),
            w_hf: mat_h(rng),
            w_cf: peep(rng),
            b_f: Tensor::zeros(vec![hidden], true),
            w_xc: mat_x(rng),
            w_hc: mat_h(rng),
            b_c: Tensor::zeros(vec![hidden], true),
            w_xo: mat_x(rng),
            w_ho: mat_h(rng),
            w_co: peep(rng),
            b_o: Tensor::zeros(vec![hidden], true),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_xi: Tensor::zeros(vec![hidden, input_dim], true),
            w_hi: Tensor::zeros(vec![hidden, hidden], true),
            w_ci: Tensor::zeros(vec![hidden], true),
            b_i: Tensor::zeros(vec![hidden], true),
            w_xf: Tensor::zeros(vec![hidden, input_dim], true),
            w_hf: Tensor::zeros(vec![hidden, hidden], true),
            w_cf: Tensor::zeros(vec![hidden], true),
            b_f: Tensor::zeros(vec![hidden], true),
            w_xc: Tensor::zeros(vec![hidden, input_dim], true),
            w_hc: Tensor::zeros(vec![hidden, hidden], true),
            b_c: Tensor::zeros(vec![hidden], true),
            w_xo: Tensor::zeros(vec![hidden, input_dim], true),
            w_ho: Tensor::zeros(vec![hidden, hidden], true),
            w_co: Tensor::zeros(vec![hidden], true),
            b_o: Tensor::zeros(vec![hidden], true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_i.shape[0]
    }

    pub fn fields(&self) -> [&Tensor; 15] {
        [
            &self.w_xi, &self.w_hi, &self.w_ci, &self.b_i, &self.w_xf, &self.w_hf, &self.w_cf,
            &self.b_f, &self.w_xc, &self.w_hc, &self.b_c, &self.w_xo, &self.w_ho, &self.w_co,
            &self.b_o,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.w_xi,
            &mut self.w_hi,
            &mut self.w_ci,
            &mut self.b_i,
            &mut self.w_xf,
            &mut self.w_hf,
            &mut self.w_cf,
            &mut self.b_f,
            &mut self.w_xc,
            &mut self.w_hc,
            &mut self.b_c,
            &mut self.w_xo,
            &mut self.w_ho,
            &mut self.w_co,
            &mut self.b_o,
        ]
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<LstmCellIds, AutodiffError> {
        let mut ids = [TensorId(0); 15];
        for ((id, t), name) in ids.iter_mut().zip(self.fields()).zip(LSTM_FIELD_NAMES) {
            *id = tape.push_named(t, &format!("{prefix}.{name}"))?;
        }
        Ok(LstmCellIds::from_slice(&ids))
    }
}

impl LstmCellIds {
    pub fn from_slice(ids: &[TensorId]) -> Self {
        assert_eq!(ids.len(), 15);
        LstmCellIds {
            w_xi: ids[0],
            w_hi: ids[1],
            w_ci: ids[2],
            b_i: ids[3],
            w_xf: ids[4],
            w_hf: ids[5],
            w_cf: ids[6],
            b_f: ids[7],
            w_xc: ids[8],
            w_hc: ids[9],
            b_c: ids[10],
            w_xo: ids[11],
            w_ho: ids[12],
            w_co: ids[13],
            b_o: ids[14],
        }
    }
}

/// Independent forward and backward cells of one bidirectional encoder.
#[derive(Debug, Clone)]
pub struct BlstmParams {
    pub fw: LstmCellParams,
    pub bw: LstmCellParams,
}

#[derive(Debug, Clone, Copy)]
pub struct BlstmIds {
    pub fw: LstmCellIds,
    pub bw: LstmCellIds,
}

impl BlstmParams {
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        BlstmParams {
            fw: LstmCellParams::init(input_dim, hidden, rng),
            bw: LstmCellParams::init(input_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fw.hidden()
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> Result<BlstmIds, AutodiffError> {
        Ok(BlstmIds {
            fw: self.fw.register(tape, &format!("{prefix}.fw"))?,
            bw: self.bw.register(tape, &format!("{prefix}.bw"))?,
        })
    }
}

/// One LSTM step:
///
/// ```text
/// i_t = S(W_xi x_t + W_hi h_{t-1} + w_ci . c_{t-1} + b_i)
/// f_t = S(W_xf x_t + W_hf h_{t-1} + w_cf . c_{t-1} + b_f)
/// c_t = f_t c_{t-1} + i_t tanh(W_xc x_t + W_hc h_{t-1} + b_c)
/// o_t = S(W_xo x_t + W_ho h_{t-1} + w_co . c_t + b_o)
/// h_t = o_t tanh(c_t)
/// ```
fn lstm_step(
    tape: &mut Tape,
    cell: &LstmCellIds,
    x_t: TensorId,
    h_prev: TensorId,
    c_prev: TensorId,
) -> Result<(TensorId, TensorId), AutodiffError> {
    let gate = |tape: &mut Tape,
                wx: TensorId,
                wh: TensorId,
                peep: Option<(TensorId, TensorId)>,
                b: TensorId|
     -> Result<TensorId, AutodiffError> {
        let mut pre = tape.matvec(wx, x_t)?;
        let hh = tape.matvec(wh, h_prev)?;
        pre = tape.add(pre, hh)?;
        if let Some((wc, c)) = peep {
            let pc = tape.mul(wc, c)?;
            pre = tape.add(pre, pc)?;
        }
        tape.add(pre, b)
    };

    let i_pre = gate(tape, cell.w_xi, cell.w_hi, Some((cell.w_ci, c_prev)), cell.b_i)?;
    let i_t = tape.sigmoid(i_pre)?;
    let f_pre = gate(tape, cell.w_xf, cell.w_hf, Some((cell.w_cf, c_prev)), cell.b_f)?;
    let f_t = tape.sigmoid(f_pre)?;
    let g_pre = gate(tape, cell.w_xc, cell.w_hc, None, cell.b_c)?;
    let g_t = tape.tanh(g_pre)?;
    let fc = tape.mul(f_t, c_prev)?;
    let ig = tape.mul(i_t, g_t)?;
    let c_t = tape.add(fc, ig)?;
    let o_pre = gate(tape, cell.w_xo, cell.w_ho, Some((cell.w_co, c_t)), cell.b_o)?;
    let o_t = tape.sigmoid(o_pre)?;
    let ct_tanh = tape.tanh(c_t)?;
    let h_t = tape.mul(o_t, ct_tanh)?;
    Ok((h_t, c_t))
}

fn run_direction(
    tape: &mut Tape,
    cell: &LstmCellIds,
    rows: &[TensorId],
    hidden: usize,
    reverse: bool,
) -> Result<Vec<TensorId>, AutodiffError> {
    let mut h = tape.zeros(vec![hidden], false)?;
    let mut c = tape.zeros(vec![hidden], false)?;
    let mut states = vec![h; rows.len()];
    let order: Vec<usize> = if reverse {
        (0..rows.len()).rev().collect()
    } else {
        (0..rows.len()).collect()
    };
    for t in order {
        let (h_t, c_t) = lstm_step(tape, cell, rows[t], h, c)?;
        states[t] = h_t;
        h = h_t;
        c = c_t;
    }
    Ok(states)
}

/// Runs the bidirectional recurrence over an embedded `[T,k]` sequence.
/// Row `t` of the `[T,2H]` result is the forward state at `t` concatenated
/// with the backward state at `t`; both directions start from zero states.
pub fn blstm_forward(
    tape: &mut Tape,
    x: TensorId,
    ids: &BlstmIds,
    hidden: usize,
) -> Result<TensorId, AutodiffError> {
    let t_len = tape.shape(x)[0];
    let rows: Vec<TensorId> = (0..t_len)
        .map(|t| tape.row(x, t))
        .collect::<Result<_, _>>()?;
    let fw = run_direction(tape, &ids.fw, &rows, hidden, false)?;
    let bw = run_direction(tape, &ids.bw, &rows, hidden, true)?;
    let cat_rows: Vec<TensorId> = fw
        .iter()
        .zip(&bw)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<_, _>>()?;
    tape.stack_rows(&cat_rows)
}

/// Softmax word attention over the first `true_length` rows of `[T,2H]`
/// hidden states; padding positions get weight exactly 0. Returns the full
/// T-length weight vector (for diagnostics) and the pooled 2H sentence
/// vector `sum_t alpha_t h_t`.
pub fn word_attention(
    tape: &mut Tape,
    h_cat: TensorId,
    beta: TensorId,
    true_length: usize,
) -> Result<(Vec<f64>, TensorId), TextError> {
    let t_len = tape.shape(h_cat)[0];
    if true_length == 0 {
        return Err(TextError::EmptySequence);
    }
    let live = true_length.min(t_len);
    let rows: Vec<TensorId> = (0..live)
        .map(|t| tape.row(h_cat, t))
        .collect::<Result<_, _>>()?;
    let logits: Vec<TensorId> = rows
        .iter()
        .map(|&r| tape.dot(beta, r))
        .collect::<Result<_, _>>()?;
    let logit_vec = tape.concat(&logits)?;
    let alpha = tape.softmax(logit_vec)?;

    let mut pooled: Option<TensorId> = None;
    for (t, &r) in rows.iter().enumerate() {
        let a_t = tape.element(alpha, t)?;
        let weighted = tape.scale(r, a_t)?;
        pooled = Some(match pooled {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let mut weights = tape.data(alpha).to_vec();
    weights.resize(t_len, 0.0);
    Ok((weights, pooled.unwrap()))
}

/// Encodes resolved attributes: one token per category in canonical order
/// (unknown categories use the padding token), embedded with the shared
/// table, run through the attribute BLSTM, and mean-pooled without
/// attention.
pub fn encode_attributes(
    tape: &mut Tape,
    attrs: &AttributeSet,
    vocab: &Vocabulary,
    table: TensorId,
    ids: &BlstmIds,
    hidden: usize,
) -> Result<TensorId, AutodiffError> {
    let indices = attribute_indices(attrs, vocab);
    let x = tape.embed_rows(table, &indices)?;
    let h_cat = blstm_forward(tape, x, ids, hidden)?;
    tape.mean_rows(h_cat)
}

/// Vocabulary indices of the attribute token sequence (fixed category
/// order, unknown -> padding index).
pub fn attribute_indices(attrs: &AttributeSet, vocab: &Vocabulary) -> Vec<usize> {
    AttributeCategory::ALL
        .iter()
        .map(|&c| attrs.get(c).map(|v| vocab.lookup(v)).unwrap_or(0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GRAD_CHECK_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_lowercases_and_splits_on_non_alphanumerics() {
        assert_eq!(
            tokenize("An elderly man, wearing a light-hat!"),
            toks(&["an", "elderly", "man", "wearing", "a", "light", "hat"])
        );
        assert!(tokenize("  ... ").is_empty());
    }

    #[test]
    fn prepare_sequence_truncates_and_pads() {
        let mut vocab = Vocabulary::new();
        let tokens: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        for t in &tokens {
            vocab.add(t);
        }
        let (idx, len) = prepare_sequence(&tokens, &vocab, 20);
        assert_eq!(idx.len(), 20);
        assert_eq!(len, 20);
        assert_eq!(idx[0], vocab.lookup("w0"));
        assert_eq!(idx[19], vocab.lookup("w19"));

        let (idx, len) = prepare_sequence(&tokens[..5], &vocab, 20);
        assert_eq!(idx.len(), 20);
        assert_eq!(len, 5);
        assert!(idx[5..].iter().all(|&i| i == 0));

        let (idx, len) = prepare_sequence(&[], &vocab, 20);
        assert_eq!(idx, vec![0; 20]);
        assert_eq!(len, 0);
    }

    #[test]
    fn oov_tokens_map_to_the_unknown_index() {
        let vocab = Vocabulary::new();
        assert_eq!(vocab.lookup("anything"), 0);
        assert_eq!(vocab.lookup(UNK_TOKEN), 0);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let mut vocab = Vocabulary::new();
        vocab.add("man");
        vocab.add("riding");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.lookup("riding"), 2);

        std::fs::write(&path, "man\nriding\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TextError::BadFile { line: 1, .. })
        ));
    }

    #[test]
    fn embedding_text_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "man 0.5 -1.25 3\nbike 1 2 0.125\n").unwrap();
        let (vocab, table) = load_embeddings(&path).unwrap();
        // <unk> synthesized at index 0 with a zero row.
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.lookup("man"), 1);
        assert_eq!(table.weights.shape, vec![3, 3]);
        assert_eq!(&table.weights.data[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&table.weights.data[3..6], &[0.5, -1.25, 3.0]);

        let out = dir.path().join("emb_out.txt");
        save_embeddings(&out, &vocab, &table).unwrap();
        let (vocab2, table2) = load_embeddings(&out).unwrap();
        assert_eq!(vocab2.len(), vocab.len());
        assert_eq!(table2.weights.data, table.weights.data);
    }

    #[test]
    fn embedding_file_with_ragged_rows_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "man 1 2\nbike 1\n").unwrap();
        assert!(matches!(
            load_embeddings(&path),
            Err(TextError::BadFile { line: 2, .. })
        ));
    }

    fn random_input(tape: &mut Tape, t: usize, k: usize, seed: u64) -> TensorId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.leaf(data, vec![t, k], false).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let (t, k, h) = (4, 3, 5);
        let params = BlstmParams {
            fw: LstmCellParams::zeros(k, h),
            bw: LstmCellParams::zeros(k, h),
        };
        let mut tape = Tape::new();
        let x = random_input(&mut tape, t, k, 1);
        let ids = params.register(&mut tape, "b").unwrap();
        let out = blstm_forward(&mut tape, x, &ids, h).unwrap();
        assert_eq!(tape.shape(out), &[t, 2 * h]);
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_output_shape() {
        let (k, h) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = BlstmParams::init(k, h, &mut rng);
        let mut tape = Tape::new();
        let x = random_input(&mut tape, 1, k, 3);
        let ids = params.register(&mut tape, "b").unwrap();
        let out = blstm_forward(&mut tape, x, &ids, h).unwrap();
        assert_eq!(tape.shape(out), &[1, 2 * h]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let (t, k, h) = (5, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = BlstmParams::init(k, h, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let x = random_input(&mut tape, t, k, 5);
            let ids = params.register(&mut tape, "b").unwrap();
            let out = blstm_forward(&mut tape, x, &ids, h).unwrap();
            tape.data(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reversing_input_and_swapping_directions_mirrors_the_output() {
        let (t, k, h) = (4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = BlstmParams::init(k, h, &mut rng);
        let swapped = BlstmParams {
            fw: params.bw.clone(),
            bw: params.fw.clone(),
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..t * k).map(|_| rng2.gen_range(-1.0..1.0)).collect();
        let mut reversed = vec![0.0; t * k];
        for row in 0..t {
            reversed[(t - 1 - row) * k..(t - row) * k].copy_from_slice(&data[row * k..(row + 1) * k]);
        }

        let mut tape_a = Tape::new();
        let xa = tape_a.leaf(data, vec![t, k], false).unwrap();
        let ids_a = params.register(&mut tape_a, "b").unwrap();
        let out_a = blstm_forward(&mut tape_a, xa, &ids_a, h).unwrap();

        let mut tape_b = Tape::new();
        let xb = tape_b.leaf(reversed, vec![t, k], false).unwrap();
        let ids_b = swapped.register(&mut tape_b, "b").unwrap();
        let out_b = blstm_forward(&mut tape_b, xb, &ids_b, h).unwrap();

        // Row t of A equals row T-1-t of B with fw/bw halves swapped.
        for row in 0..t {
            let a = &tape_a.data(out_a)[row * 2 * h..(row + 1) * 2 * h];
            let b = &tape_b.data(out_b)[(t - 1 - row) * 2 * h..(t - row) * 2 * h];
            assert_eq!(&a[..h], &b[h..]);
            assert_eq!(&a[h..], &b[..h]);
        }
    }

    #[test]
    fn states_stay_finite_over_long_bounded_sequences() {
        let (t, k, h) = (100, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = BlstmParams::init(k, h, &mut rng);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let x = tape.leaf(data, vec![t, k], false).unwrap();
        let ids = params.register(&mut tape, "b").unwrap();
        let out = blstm_forward(&mut tape, x, &ids, h).unwrap();
        assert!(tape.data(out).iter().all(|v| v.is_finite()));
        assert!(tape.first_non_finite().is_none());
    }

    #[test]
    fn blstm_gradients_match_finite_differences_on_a_micro_instance() {
        let (t, k, h) = (3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = BlstmParams::init(k, h, &mut rng);
        let mut flat: Vec<Tensor> = params
            .fw
            .fields()
            .into_iter()
            .chain(params.bw.fields())
            .cloned()
            .collect();
        let x_data: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..t * 2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let err = grad_check(
            |tape, ids| {
                let blstm = BlstmIds {
                    fw: LstmCellIds::from_slice(&ids[..15]),
                    bw: LstmCellIds::from_slice(&ids[15..30]),
                };
                let x = tape.leaf(x_data.clone(), vec![t, k], false)?;
                let out = blstm_forward(tape, x, &blstm, h)?;
                let w = tape.leaf(probe.clone(), vec![t, 2 * h], false)?;
                let prod = tape.mul(out, w)?;
                tape.sum(prod)
            },
            &mut flat,
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn attention_on_identical_rows_is_uniform() {
        let (t, h) = (4, 3);
        let mut tape = Tape::new();
        let row: Vec<f64> = vec![0.3, -0.7, 1.1];
        let data: Vec<f64> = row
            .iter()
            .chain(&row)
            .cycle()
            .take(t * 2 * h / (2 * h) * 2 * h)
            .cloned()
            .collect();
        let data: Vec<f64> = (0..t).flat_map(|_| data[..2 * h].to_vec()).collect();
        let h_cat = tape.leaf(data, vec![t, 2 * h], false).unwrap();
        let beta = tape.constant(vec![0.5, 1.0, -0.25, 0.0, 2.0, 0.125]).unwrap();
        let (alpha, _) = word_attention(&mut tape, h_cat, beta, t).unwrap();
        for a in &alpha {
            assert!((a - 1.0 / t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_masks_padding_to_exactly_zero_and_sums_to_one() {
        let (t, h) = (5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..t * 2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h_cat = tape.leaf(data, vec![t, 2 * h], false).unwrap();
        let beta_v: Vec<f64> = (0..2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta = tape.constant(beta_v).unwrap();
        let (alpha, _) = word_attention(&mut tape, h_cat, beta, 3).unwrap();
        assert_eq!(alpha.len(), t);
        assert_eq!(alpha[3], 0.0);
        assert_eq!(alpha[4], 0.0);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn attention_with_single_live_row_returns_that_row() {
        let (t, h) = (3, 2);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..t * 2 * h).map(|i| i as f64).collect();
        let h_cat = tape.leaf(data.clone(), vec![t, 2 * h], false).unwrap();
        let beta = tape.constant(vec![1.0; 2 * h]).unwrap();
        let (alpha, pooled) = word_attention(&mut tape, h_cat, beta, 1).unwrap();
        assert_eq!(alpha, vec![1.0, 0.0, 0.0]);
        assert_eq!(tape.data(pooled), &data[..2 * h]);
    }

    #[test]
    fn zero_projection_pools_the_mean_of_unmasked_rows() {
        let (t, h) = (4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..t * 2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h_cat = tape.leaf(data.clone(), vec![t, 2 * h], false).unwrap();
        let beta = tape.constant(vec![0.0; 2 * h]).unwrap();
        let live = 3;
        let (alpha, pooled) = word_attention(&mut tape, h_cat, beta, live).unwrap();
        for a in &alpha[..live] {
            assert!((a - 1.0 / live as f64).abs() < 1e-15);
        }
        for c in 0..2 * h {
            let mean: f64 = (0..live).map(|r| data[r * 2 * h + c]).sum::<f64>() / live as f64;
            assert!((tape.data(pooled)[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_over_zero_length_is_a_domain_error() {
        let mut tape = Tape::new();
        let h_cat = tape.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
        let beta = tape.constant(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            word_attention(&mut tape, h_cat, beta, 0),
            Err(TextError::EmptySequence)
        ));
    }

    #[test]
    fn attribute_encoding_is_order_invariant_by_construction() {
        let mut a = AttributeSet::unknown();
        a.set(AttributeCategory::Gender, "male").unwrap();
        a.set(AttributeCategory::Location, "on_right_side").unwrap();
        let mut b = AttributeSet::unknown();
        b.set(AttributeCategory::Location, "on_right_side").unwrap();
        b.set(AttributeCategory::Gender, "male").unwrap();

        let mut vocab = Vocabulary::new();
        vocab.add("male");
        vocab.add("on_right_side");
        assert_eq!(attribute_indices(&a, &vocab), attribute_indices(&b, &vocab));
    }

    #[test]
    fn all_unknown_attributes_encode_the_padding_sequence() {
        let (k, h) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = BlstmParams::init(k, h, &mut rng);
        let table = Tensor::uniform(vec![5, k], 0.08, &mut rng);
        let vocab = Vocabulary::new();

        let encode = || {
            let mut tape = Tape::new();
            let table_id = tape.push_tensor(&table).unwrap();
            let ids = params.register(&mut tape, "attr").unwrap();
            let out = encode_attributes(
                &mut tape,
                &AttributeSet::unknown(),
                &vocab,
                table_id,
                &ids,
                h,
            )
            .unwrap();
            tape.data(out).to_vec()
        };
        let first = encode();
        assert_eq!(first.len(), 2 * h);
        assert_eq!(first, encode());

        // Identical to explicitly embedding eight padding tokens.
        let mut tape = Tape::new();
        let table_id = tape.push_tensor(&table).unwrap();
        let ids = params.register(&mut tape, "attr").unwrap();
        let x = tape.embed_rows(table_id, &[0; 8]).unwrap();
        let h_cat = blstm_forward(&mut tape, x, &ids, h).unwrap();
        let pooled = tape.mean_rows(h_cat).unwrap();
        assert_eq!(first, tape.data(pooled));
    }

    #[test]
    fn attribute_encoder_gradients_match_finite_differences() {
        let (k, h) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = BlstmParams::init(k, h, &mut rng);
        let table = Tensor::uniform(vec![6, k], 0.08, &mut rng);
        let mut vocab = Vocabulary::new();
        vocab.add("male");
        vocab.add("long_hair");
        let mut attrs = AttributeSet::unknown();
        attrs.set(AttributeCategory::Gender, "male").unwrap();
        attrs.set(AttributeCategory::Hair, "long_hair").unwrap();
        let probe: Vec<f64> = (0..2 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut flat: Vec<Tensor> = std::iter::once(table.clone())
            .chain(params.fw.fields().into_iter().cloned())
            .chain(params.bw.fields().into_iter().cloned())
            .collect();
        let err = grad_check(
            |tape, ids| {
                let blstm = BlstmIds {
                    fw: LstmCellIds::from_slice(&ids[1..16]),
                    bw: LstmCellIds::from_slice(&ids[16..31]),
                };
                let out = encode_attributes(tape, &attrs, &vocab, ids[0], &blstm, h)?;
                let w = tape.leaf(probe.clone(), vec![2 * h], false)?;
                tape.dot(out, w)
            },
            &mut flat,
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
