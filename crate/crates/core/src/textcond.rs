//! Instruction synthesis and text conditioning: a closed word-level
//! vocabulary, per-attribute paraphrase templates, token position
//! randomization (TPR), and a frozen seeded token embedder standing in for
//! the CLIP text tower.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::num::Real;
use crate::seed::rng_from;

/// Fixed token sequence length.
pub const SEQ_LEN: usize = 77;
/// Largest TPR start offset.
pub const TPR_MAX_START: usize = 30;
pub const PAD_ID: u32 = 0;

/// Human-readable attribute words; indices past the list fall back to
/// synthesized names.
const ATTRIBUTE_WORDS: &[&str] = &[
    "bangs", "smile", "glasses", "beard", "hat", "makeup", "freckles", "dimples", "curls",
    "piercings", "wrinkles", "blush",
];

pub fn attribute_word(attr: usize) -> String {
    ATTRIBUTE_WORDS
        .get(attr)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("trait{attr}"))
}

/// Training-time paraphrases, five-plus per sign. `{a}` is the attribute slot.
const ADD_TEMPLATES: &[&str] = &[
    "add {a}",
    "give the person {a}",
    "put {a} on the face",
    "make the face show {a}",
    "apply {a} to the person",
    "let the face gain {a}",
];
const REMOVE_TEMPLATES: &[&str] = &[
    "remove the {a}",
    "take away the {a}",
    "erase {a} from the face",
    "make the face lose {a}",
    "strip the {a} off",
    "rid the person of {a}",
];

/// Held-out paraphrases for evaluation, never drawn during training.
const ADD_TEMPLATES_HELD_OUT: &[&str] = &[
    "attach {a} to the person",
    "grant the face {a}",
    "bestow {a} upon the person",
    "furnish the person with {a}",
    "equip the face with {a}",
];
const REMOVE_TEMPLATES_HELD_OUT: &[&str] = &[
    "detach {a} from the person",
    "withdraw the {a}",
    "clear {a} off the face",
    "eliminate the {a}",
    "discard the {a}",
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    word_to_id: BTreeMap<String, u32>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    /// Builds the closed vocabulary over a word list. Id 0 is the pad token
    /// and is never produced by a real word.
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut uniq: Vec<String> = words.into_iter().collect();
        uniq.sort();
        uniq.dedup();
        let mut word_to_id = BTreeMap::new();
        let mut id_to_word = vec!["<pad>".to_string()];
        for w in uniq {
            word_to_id.insert(w.clone(), id_to_word.len() as u32);
            id_to_word.push(w);
        }
        Self { word_to_id, id_to_word }
    }

    /// Vocabulary covering the built-in template sets for `n_attr` attributes.
    pub fn builtin(n_attr: usize) -> Self {
        let mut words: Vec<String> = vec![".".into()];
        for tmpl in ADD_TEMPLATES
            .iter()
            .chain(REMOVE_TEMPLATES)
            .chain(ADD_TEMPLATES_HELD_OUT)
            .chain(REMOVE_TEMPLATES_HELD_OUT)
        {
            for word in tmpl.split_whitespace() {
                if word != "{a}" {
                    words.push(word.to_string());
                }
            }
        }
        for attr in 0..n_attr {
            words.push(attribute_word(attr));
        }
        Self::new(words)
    }

    pub fn size(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn id_of(&self, word: &str) -> Result<u32> {
        self.word_to_id
            .get(word)
            .copied()
            .ok_or_else(|| EditError::UnknownWord { word: word.to_string() })
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        if id == PAD_ID {
            return None;
        }
        self.id_to_word.get(id as usize).map(|s| s.as_str())
    }
}

/// Normalization applied before lookup: lowercase, whitespace split, trailing
/// sentence punctuation stripped except the separator ".".
fn normalize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        if lower == "." {
            out.push(lower);
            continue;
        }
        let trimmed: String = lower
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '{' || *c == '}')
            .collect();
        if !trimmed.is_empty() {
            out.push(trimmed);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionTemplateSet {
    /// attribute -> sign ("+"/"-") -> templates with a `{a}` slot.
    templates: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    #[serde(skip)]
    n_attr: usize,
}

impl InstructionTemplateSet {
    pub fn builtin(n_attr: usize) -> Self {
        Self::from_templates(n_attr, ADD_TEMPLATES, REMOVE_TEMPLATES)
    }

    /// Evaluation paraphrases disjoint from the training set.
    pub fn held_out(n_attr: usize) -> Self {
        Self::from_templates(n_attr, ADD_TEMPLATES_HELD_OUT, REMOVE_TEMPLATES_HELD_OUT)
    }

    fn from_templates(n_attr: usize, add: &[&str], remove: &[&str]) -> Self {
        let mut templates = BTreeMap::new();
        for attr in 0..n_attr {
            let mut per_sign = BTreeMap::new();
            per_sign.insert("+".to_string(), add.iter().map(|s| s.to_string()).collect());
            per_sign.insert("-".to_string(), remove.iter().map(|s| s.to_string()).collect());
            templates.insert(attribute_word(attr), per_sign);
        }
        Self { templates, n_attr }
    }

    pub fn load(path: &Path, n_attr: usize) -> Result<Self> {
        let templates: BTreeMap<String, BTreeMap<String, Vec<String>>> =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let set = Self { templates, n_attr };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for attr in 0..self.n_attr {
            let word = attribute_word(attr);
            let per_sign = self.templates.get(&word).ok_or_else(|| {
                EditError::InvalidConfig(format!("template set missing attribute {word:?}"))
            })?;
            for sign in ["+", "-"] {
                let list = per_sign.get(sign).ok_or_else(|| {
                    EditError::InvalidConfig(format!("attribute {word:?} missing sign {sign:?}"))
                })?;
                let mut distinct: Vec<&String> = list.iter().collect();
                distinct.sort();
                distinct.dedup();
                if distinct.len() < 5 {
                    return Err(EditError::InvalidConfig(format!(
                        "attribute {word:?} sign {sign:?} has {} templates (need >= 5)",
                        distinct.len()
                    )));
                }
                for t in list {
                    if !t.contains("{a}") {
                        return Err(EditError::InvalidConfig(format!(
                            "template {t:?} has no attribute slot"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_attr(&self) -> usize {
        self.n_attr
    }

    fn list(&self, attr: usize, sign: i8) -> Result<&[String]> {
        let word = attribute_word(attr);
        let per_sign = self
            .templates
            .get(&word)
            .ok_or(EditError::UnknownAttribute(attr))?;
        let key = if sign >= 0 { "+" } else { "-" };
        per_sign
            .get(key)
            .map(|v| v.as_slice())
            .ok_or(EditError::UnknownAttribute(attr))
    }

    pub fn n_templates(&self, attr: usize, sign: i8) -> Result<usize> {
        Ok(self.list(attr, sign)?.len())
    }
}

/// Samples one paraphrase uniformly and fills in the attribute word.
pub fn render_instruction<R: Rng>(
    templates: &InstructionTemplateSet,
    attr: usize,
    sign: i8,
    rng: &mut R,
) -> Result<String> {
    let list = templates.list(attr, sign)?;
    let idx = rng.gen_range(0..list.len());
    Ok(list[idx].replace("{a}", &attribute_word(attr)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Exactly `SEQ_LEN` ids; pad is 0.
    pub ids: Vec<u32>,
    pub start_offset: usize,
}

impl TokenSequence {
    pub fn last_nonzero(&self) -> Option<usize> {
        self.ids.iter().rposition(|&id| id != PAD_ID)
    }

    pub fn token_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD_ID).count()
    }
}

/// Tokenizes text into a left-aligned padded sequence.
pub fn tokenize(vocab: &Vocabulary, text: &str) -> Result<TokenSequence> {
    let words = normalize_words(text);
    if words.len() > SEQ_LEN {
        return Err(EditError::TokenOverflow { got: words.len(), cap: SEQ_LEN });
    }
    let mut ids = vec![PAD_ID; SEQ_LEN];
    for (i, w) in words.iter().enumerate() {
        ids[i] = vocab.id_of(w)?;
    }
    Ok(TokenSequence { ids, start_offset: 0 })
}

/// Inverse of `tokenize` up to whitespace normalization.
pub fn detokenize(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    seq.ids
        .iter()
        .filter_map(|&id| vocab.word_of(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token position randomization: shifts the non-pad tokens right by a uniform
/// offset in {0..min(max_start, headroom)}, preserving relative order.
pub fn place_with_tpr<R: Rng>(
    seq: &TokenSequence,
    rng: &mut R,
    max_start: usize,
) -> TokenSequence {
    debug_assert_eq!(seq.start_offset, 0);
    let last = match seq.last_nonzero() {
        Some(p) => p,
        None => return seq.clone(),
    };
    let headroom = SEQ_LEN - 1 - last;
    let bound = max_start.min(headroom);
    let offset = rng.gen_range(0..=bound);
    let mut ids = vec![PAD_ID; SEQ_LEN];
    for (i, &id) in seq.ids.iter().enumerate() {
        if id != PAD_ID {
            ids[i + offset] = id;
        }
    }
    TokenSequence { ids, start_offset: offset }
}

/// Joins single instructions with the "." separator.
pub fn concat_instructions(vocab: &Vocabulary, texts: &[String]) -> Result<String> {
    let joined = texts
        .iter()
        .map(|t| t.trim().trim_end_matches('.').trim().to_string())
        .collect::<Vec<_>>()
        .join(" . ");
    let count = normalize_words(&joined).len();
    if count > SEQ_LEN {
        return Err(EditError::TokenOverflow { got: count, cap: SEQ_LEN });
    }
    // Closed-vocabulary guarantee: every word must tokenize.
    tokenize(vocab, &joined)?;
    Ok(joined)
}

/// 77 x d_txt conditioning matrix; pad rows are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSeq<F>(pub Array2<F>);

/// Frozen seeded embedding table plus sinusoidal positions on non-pad rows.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    /// (V, d_txt) in f64 so all scalar types derive from one table.
    table: Array2<f64>,
    d_txt: usize,
}

impl TextEmbedder {
    pub fn new(vocab_size: usize, d_txt: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let std = 1.0 / (d_txt as f64).sqrt();
        let table = crate::num::normal_mat::<f64, _>(&mut rng, vocab_size, d_txt, std);
        Self { table, d_txt }
    }

    pub fn d_txt(&self) -> usize {
        self.d_txt
    }

    fn positional(&self, pos: usize) -> Array1<f64> {
        let mut row = Array1::zeros(self.d_txt);
        for i in 0..self.d_txt / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / self.d_txt as f64);
            row[2 * i] = (pos as f64 * freq).sin();
            row[2 * i + 1] = (pos as f64 * freq).cos();
        }
        if self.d_txt % 2 == 1 {
            let i = self.d_txt / 2;
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / self.d_txt as f64);
            row[self.d_txt - 1] = (pos as f64 * freq).sin();
        }
        row
    }

    pub fn embed<F: Real>(&self, seq: &TokenSequence) -> Result<TextEmbeddingSeq<F>> {
        let mut out = Array2::zeros((SEQ_LEN, self.d_txt));
        for (pos, &id) in seq.ids.iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            if id as usize >= self.table.dim().0 {
                return Err(EditError::OutOfRange(format!(
                    "token id {id} outside embedding table of size {}",
                    self.table.dim().0
                )));
            }
            let pe = self.positional(pos);
            for j in 0..self.d_txt {
                out[[pos, j]] = F::from_f64(self.table[[id as usize, j]] + pe[j]);
            }
        }
        Ok(TextEmbeddingSeq(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use std::collections::HashSet;

    #[test]
    fn render_covers_all_paraphrases() {
        let set = InstructionTemplateSet::builtin(4);
        set.validate().unwrap();
        let mut rng = rng_from(1);
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            seen.insert(render_instruction(&set, 2, 1, &mut rng).unwrap());
        }
        assert!(seen.len() >= 5, "only {} paraphrases seen", seen.len());
        // Seeded determinism.
        let a = render_instruction(&set, 1, -1, &mut rng_from(9)).unwrap();
        let b = render_instruction(&set, 1, -1, &mut rng_from(9)).unwrap();
        assert_eq!(a, b);
        assert!(render_instruction(&set, 99, 1, &mut rng).is_err());
    }

    #[test]
    fn rendered_text_tokenizes() {
        let n_attr = 6;
        let vocab = Vocabulary::builtin(n_attr);
        let mut rng = rng_from(2);
        for set in [
            InstructionTemplateSet::builtin(n_attr),
            InstructionTemplateSet::held_out(n_attr),
        ] {
            for attr in 0..n_attr {
                for &sign in &[1i8, -1] {
                    for _ in 0..20 {
                        let text = render_instruction(&set, attr, sign, &mut rng).unwrap();
                        let seq = tokenize(&vocab, &text).unwrap();
                        assert!(seq.token_count() > 0);
                        assert!(text.contains(&attribute_word(attr)));
                    }
                }
            }
        }
    }

    #[test]
    fn tokenize_round_trip_and_edges() {
        let vocab = Vocabulary::builtin(4);
        let empty = tokenize(&vocab, "").unwrap();
        assert_eq!(empty.token_count(), 0);
        assert!(empty.ids.iter().all(|&id| id == PAD_ID));

        let text = "add bangs . add the smile";
        let seq = tokenize(&vocab, text).unwrap();
        assert_eq!(seq.token_count(), 6);
        assert_eq!(detokenize(&vocab, &seq), text);
        assert!(tokenize(&vocab, "zebra").is_err());
    }

    #[test]
    fn tpr_preserves_order_and_bounds() {
        let vocab = Vocabulary::builtin(4);
        let seq = tokenize(&vocab, "add bangs").unwrap();
        let mut rng = rng_from(3);
        for _ in 0..10_000 {
            let shifted = place_with_tpr(&seq, &mut rng, TPR_MAX_START);
            assert!(shifted.last_nonzero().unwrap() < SEQ_LEN);
            let orig: Vec<u32> = seq.ids.iter().copied().filter(|&i| i != PAD_ID).collect();
            let moved: Vec<u32> = shifted.ids.iter().copied().filter(|&i| i != PAD_ID).collect();
            assert_eq!(orig, moved);
            assert!(shifted.start_offset <= TPR_MAX_START);
        }
    }

    #[test]
    fn tpr_offset_distribution_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let vocab = Vocabulary::builtin(4);
        let seq = tokenize(&vocab, "add bangs").unwrap();
        let mut rng = rng_from(4);
        let trials = 10_000usize;
        let bins = TPR_MAX_START + 1;
        let mut counts = vec![0usize; bins];
        for _ in 0..trials {
            let shifted = place_with_tpr(&seq, &mut rng, TPR_MAX_START);
            counts[shifted.start_offset] += 1;
        }
        let expected = trials as f64 / bins as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((bins - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}");
    }

    #[test]
    fn tpr_clamps_long_sequences() {
        let vocab = Vocabulary::builtin(4);
        let many = vec!["add bangs".to_string(); 12];
        let text = concat_instructions(&vocab, &many).unwrap();
        let seq = tokenize(&vocab, &text).unwrap();
        let mut rng = rng_from(5);
        for _ in 0..1000 {
            let shifted = place_with_tpr(&seq, &mut rng, TPR_MAX_START);
            assert!(shifted.last_nonzero().unwrap() < SEQ_LEN);
        }
    }

    #[test]
    fn embed_pad_convention_and_position_sensitivity() {
        let vocab = Vocabulary::builtin(4);
        let embedder = TextEmbedder::new(vocab.size(), 16, 7);
        let empty = tokenize(&vocab, "").unwrap();
        let zero = embedder.embed::<f64>(&empty).unwrap();
        assert!(zero.0.iter().all(|&v| v == 0.0));

        let seq = tokenize(&vocab, "add bangs").unwrap();
        let a = embedder.embed::<f64>(&seq).unwrap();
        let b = embedder.embed::<f64>(&seq).unwrap();
        assert_eq!(a.0, b.0);

        let mut ids = vec![PAD_ID; SEQ_LEN];
        ids[10] = seq.ids[0];
        ids[11] = seq.ids[1];
        let shifted = TokenSequence { ids, start_offset: 10 };
        let c = embedder.embed::<f64>(&shifted).unwrap();
        let row_a = a.0.row(0).to_owned();
        let row_c = c.0.row(10).to_owned();
        assert_ne!(row_a, row_c, "positional encoding must distinguish offsets");
    }

    #[test]
    fn embed_no_duplicate_rows_for_used_pairs() {
        let vocab = Vocabulary::builtin(6);
        let embedder = TextEmbedder::new(vocab.size(), 16, 8);
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for id in 1..vocab.size() as u32 {
            for pos in [0usize, 5, 30] {
                let mut ids = vec![PAD_ID; SEQ_LEN];
                ids[pos] = id;
                let seq = TokenSequence { ids, start_offset: pos };
                let e = embedder.embed::<f64>(&seq).unwrap();
                rows.push(e.0.row(pos).iter().map(|v| v.to_bits()).collect());
            }
        }
        let before = rows.len();
        rows.sort();
        rows.dedup();
        assert_eq!(before, rows.len());
    }

    #[test]
    fn concat_is_definition() {
        let vocab = Vocabulary::builtin(4);
        let joined = concat_instructions(
            &vocab,
            &["add bangs".to_string(), "add the smile".to_string()],
        )
        .unwrap();
        assert_eq!(joined, "add bangs . add the smile");
        let single = concat_instructions(&vocab, &["add bangs.".to_string()]).unwrap();
        assert_eq!(single, "add bangs");
    }

    #[test]
    fn builtin_triples_fit_in_sequence() {
        // Every 3-instruction composite over the built-in templates tokenizes.
        let n_attr = 6;
        let vocab = Vocabulary::builtin(n_attr);
        let set = InstructionTemplateSet::builtin(n_attr);
        let mut rng = rng_from(6);
        for _ in 0..200 {
            let texts: Vec<String> = (0..3)
                .map(|i| render_instruction(&set, i % n_attr, if i % 2 == 0 { 1 } else { -1 }, &mut rng).unwrap())
                .collect();
            let joined = concat_instructions(&vocab, &texts).unwrap();
            let seq = tokenize(&vocab, &joined).unwrap();
            assert!(seq.token_count() <= SEQ_LEN);
        }
    }

    #[test]
    fn template_set_json_round_trip() {
        let set = InstructionTemplateSet::builtin(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.json");
        std::fs::write(&path, serde_json::to_string_pretty(&set.templates).unwrap()).unwrap();
        let loaded = InstructionTemplateSet::load(&path, 3).unwrap();
        assert_eq!(loaded.templates, set.templates);
    }
}
