//! Text-to-phoneme conversion via pronunciation lexicon lookup.
//!
//! Raw sentences are case-folded, stripped of punctuation, looked up in a
//! CMUdict-style lexicon (primary pronunciation) and optionally decorated
//! with silence tokens at word boundaries. The phoneme inventory is built
//! from the lexicon itself, so non-English lexicons work unchanged.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{io_err, Error, Result};
use crate::hash::Fnv1a;
use crate::rng::Xoshiro256StarStar;

/// Reserved silence token label.
pub const SIL_LABEL: &str = "SIL";
/// Reserved out-of-vocabulary token label (only present under the unk policy).
pub const UNK_LABEL: &str = "UNK";

/// Dense phoneme identifier; ids are 0-based indices into the inventory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhonemeId(pub u16);

/// Closed phoneme alphabet. Ids map bijectively onto `0..len`, `SIL` is
/// always present exactly once, and the fingerprint is a stable hash of the
/// ordered labels used to reject cross-inventory comparisons.
#[derive(Clone, Debug)]
pub struct PhonemeInventory {
    labels: Vec<String>,
    index: HashMap<String, PhonemeId>,
    sil: PhonemeId,
    unk: Option<PhonemeId>,
    fingerprint: u64,
}

impl PhonemeInventory {
    /// Build an inventory from unique labels. `SIL` is appended when missing.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ordered: Vec<String> = Vec::new();
        let mut index: HashMap<String, PhonemeId> = HashMap::new();
        for label in labels {
            let label = label.into();
            if label.is_empty() {
                return Err(Error::InvalidArgument("empty phoneme label".into()));
            }
            if index.contains_key(&label) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate phoneme label {label:?}"
                )));
            }
            if ordered.len() >= usize::from(u16::MAX) {
                return Err(Error::InvalidArgument(
                    "inventory exceeds 65535 phonemes".into(),
                ));
            }
            index.insert(label.clone(), PhonemeId(ordered.len() as u16));
            ordered.push(label);
        }
        if !index.contains_key(SIL_LABEL) {
            index.insert(SIL_LABEL.to_string(), PhonemeId(ordered.len() as u16));
            ordered.push(SIL_LABEL.to_string());
        }
        let sil = index[SIL_LABEL];
        let unk = index.get(UNK_LABEL).copied();
        let fingerprint = fingerprint_labels(&ordered);
        Ok(PhonemeInventory {
            labels: ordered,
            index,
            sil,
            unk,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // SIL is always present
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Option<PhonemeId> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: PhonemeId) -> Option<&str> {
        self.labels.get(usize::from(id.0)).map(String::as_str)
    }

    pub fn sil(&self) -> PhonemeId {
        self.sil
    }

    pub fn unk(&self) -> Option<PhonemeId> {
        self.unk
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Copy of this inventory with `UNK` appended (no-op if already present).
    pub fn with_unk(&self) -> Result<Self> {
        if self.unk.is_some() {
            return Ok(self.clone());
        }
        let mut labels = self.labels.clone();
        labels.push(UNK_LABEL.to_string());
        Self::from_labels(labels)
    }
}

/// Stable fingerprint of an ordered label list.
pub(crate) fn fingerprint_labels(labels: &[String]) -> u64 {
    let mut h = Fnv1a::new();
    for label in labels {
        h.update(label.as_bytes());
        h.update(b"\n");
    }
    h.finish()
}

/// Word-to-pronunciation mapping over one inventory. The first pronunciation
/// listed for a word is its primary.
#[derive(Clone, Debug)]
pub struct PronunciationLexicon {
    inventory: PhonemeInventory,
    entries: HashMap<String, Vec<Vec<PhonemeId>>>,
}

impl PronunciationLexicon {
    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }

    /// Number of distinct words.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pronunciations(&self, word: &str) -> Option<&[Vec<PhonemeId>]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn primary(&self, word: &str) -> Option<&[PhonemeId]> {
        self.entries
            .get(word)
            .and_then(|p| p.first())
            .map(Vec::as_slice)
    }

    /// Same lexicon with `UNK` added to the inventory (required by
    /// [`OovPolicy::Unk`]). Existing ids are unchanged by the append.
    pub fn with_unk(&self) -> Result<Self> {
        Ok(PronunciationLexicon {
            inventory: self.inventory.with_unk()?,
            entries: self.entries.clone(),
        })
    }
}

/// Load a CMUdict-style lexicon file. UTF-8 with Latin-1 fallback.
pub fn load_lexicon(path: &Path, strip_stress: bool) -> Result<PronunciationLexicon> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    parse_lexicon_bytes(&bytes, strip_stress, &path.display().to_string())
}

/// Parse lexicon bytes, decoding UTF-8 and falling back to Latin-1.
pub fn parse_lexicon_bytes(
    bytes: &[u8],
    strip_stress: bool,
    source_name: &str,
) -> Result<PronunciationLexicon> {
    let text: Cow<'_, str> = match std::str::from_utf8(bytes) {
        Ok(s) => Cow::Borrowed(s),
        Err(_) => Cow::Owned(bytes.iter().map(|&b| char::from(b)).collect()),
    };
    parse_lexicon_str(&text, strip_stress, source_name)
}

/// Parse lexicon text: one `WORD PH1 PH2 ...` entry per line, `WORD(2)`
/// variant syntax, `;;;` comments. Identical duplicate entries are accepted
/// silently; a line with a word but no phonemes is a parse error.
pub fn parse_lexicon_str(
    text: &str,
    strip_stress: bool,
    source_name: &str,
) -> Result<PronunciationLexicon> {
    let mut raw: Vec<(String, Vec<String>)> = Vec::new();
    let mut labels: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.starts_with(";;;") {
            continue;
        }
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else {
            continue; // blank line
        };
        let prons: Vec<String> = fields
            .map(|p| {
                let p = if strip_stress { strip_stress_label(p) } else { p };
                p.to_string()
            })
            .collect();
        if prons.is_empty() {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: idx + 1,
                msg: format!("expected `WORD PH1 [PH2 ...]`, got {line:?}"),
            });
        }
        for p in &prons {
            if !labels.contains(p.as_str()) {
                labels.insert(p.clone());
            }
        }
        raw.push((variant_base(word).to_uppercase(), prons));
    }
    labels.insert(SIL_LABEL.to_string());
    let inventory = PhonemeInventory::from_labels(labels)?;

    let mut entries: HashMap<String, Vec<Vec<PhonemeId>>> = HashMap::new();
    for (word, prons) in raw {
        let ids: Vec<PhonemeId> = prons
            .iter()
            .map(|l| inventory.id(l).expect("label interned above"))
            .collect();
        let list = entries.entry(word).or_default();
        if !list.contains(&ids) {
            list.push(ids);
        }
    }
    Ok(PronunciationLexicon { inventory, entries })
}

/// `WORD(2)` -> `WORD`; anything not matching the variant pattern is kept whole.
fn variant_base(word: &str) -> &str {
    if let Some(open) = word.rfind('(') {
        let inner = &word[open + 1..];
        if open > 0
            && inner.ends_with(')')
            && inner.len() > 1
            && inner[..inner.len() - 1].bytes().all(|b| b.is_ascii_digit())
        {
            return &word[..open];
        }
    }
    word
}

/// Drop a trailing stress digit (0-2) from an ARPAbet-style label.
fn strip_stress_label(label: &str) -> &str {
    let b = label.as_bytes();
    if b.len() > 1 && matches!(b[b.len() - 1], b'0' | b'1' | b'2') {
        &label[..label.len() - 1]
    } else {
        label
    }
}

/// Case-fold a sentence to upper case, drop Unicode punctuation except
/// intra-word apostrophes, and split on whitespace. Total function.
pub fn normalize_text(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw
        .to_uppercase()
        .chars()
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.general_category_group() == GeneralCategoryGroup::Punctuation {
            let intra_word = c == '\''
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if intra_word {
                cleaned.push(c);
            }
        } else {
            cleaned.push(c);
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// What to do with words missing from the lexicon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// Skip the whole sentence (default; keeps distributions lookup-exact).
    DropSentence,
    /// Omit the unknown word, keep the rest of the sentence.
    DropWord,
    /// Map the unknown word to the dedicated `UNK` phoneme.
    Unk,
}

impl fmt::Display for OovPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OovPolicy::DropSentence => "drop_sentence",
            OovPolicy::DropWord => "drop_word",
            OovPolicy::Unk => "unk",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for OovPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop-sentence" | "drop_sentence" => Ok(OovPolicy::DropSentence),
            "drop-word" | "drop_word" => Ok(OovPolicy::DropWord),
            "unk" => Ok(OovPolicy::Unk),
            other => Err(Error::InvalidArgument(format!(
                "unknown oov policy {other:?} (expected drop-sentence, drop-word or unk)"
            ))),
        }
    }
}

/// An utterance or sentence as phoneme ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<PhonemeId>,
    pub origin: Option<String>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<PhonemeId>) -> Self {
        PhonemeSequence { ids, origin: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A phonemized sentence plus the interior positions separating words
/// (inputs to [`insert_silence`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemizedSentence {
    pub seq: PhonemeSequence,
    pub word_boundaries: Vec<usize>,
}

/// Result of phonemizing one sentence. `sentence` is `None` when the
/// sentence was skipped under [`OovPolicy::DropSentence`].
#[derive(Clone, Debug)]
pub struct PhonemizeOutcome {
    pub sentence: Option<PhonemizedSentence>,
    pub tokens: usize,
    pub oov_tokens: usize,
}

/// Concatenate each token's primary pronunciation, applying the OOV policy.
pub fn phonemize_sentence(
    tokens: &[String],
    lexicon: &PronunciationLexicon,
    policy: OovPolicy,
) -> Result<PhonemizeOutcome> {
    let unk = match policy {
        OovPolicy::Unk => Some(lexicon.inventory().unk().ok_or_else(|| {
            Error::InvalidArgument(
                "oov policy `unk` requires an inventory with UNK; use with_unk()".into(),
            )
        })?),
        _ => None,
    };

    let mut oov_tokens = 0usize;
    let unk_pron;
    let mut parts: Vec<&[PhonemeId]> = Vec::with_capacity(tokens.len());
    if let Some(unk_id) = unk {
        unk_pron = [unk_id];
        for token in tokens {
            match lexicon.primary(token) {
                Some(pron) => parts.push(pron),
                None => {
                    oov_tokens += 1;
                    parts.push(&unk_pron);
                }
            }
        }
    } else {
        for token in tokens {
            match lexicon.primary(token) {
                Some(pron) => parts.push(pron),
                None => {
                    oov_tokens += 1;
                    if policy == OovPolicy::DropSentence {
                        // Keep counting OOVs for statistics before bailing.
                        continue;
                    }
                }
            }
        }
        if policy == OovPolicy::DropSentence && oov_tokens > 0 {
            return Ok(PhonemizeOutcome {
                sentence: None,
                tokens: tokens.len(),
                oov_tokens,
            });
        }
    }

    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut ids = Vec::with_capacity(total);
    let mut word_boundaries = Vec::with_capacity(parts.len().saturating_sub(1));
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            word_boundaries.push(ids.len());
        }
        ids.extend_from_slice(part);
    }
    Ok(PhonemizeOutcome {
        sentence: Some(PhonemizedSentence {
            seq: PhonemeSequence::new(ids),
            word_boundaries,
        }),
        tokens: tokens.len(),
        oov_tokens,
    })
}

/// Insert `SIL` at each word boundary with independent probability `rate`,
/// and unconditionally at the start and end of the sequence. One Bernoulli
/// draw is consumed per boundary regardless of outcome, so the draw stream
/// is a pure function of (seed, boundary index).
pub fn insert_silence(
    seq: &PhonemeSequence,
    word_boundaries: &[usize],
    rate: f64,
    rng: &mut Xoshiro256StarStar,
    inventory: &PhonemeInventory,
) -> Result<PhonemeSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "silence rate {rate} outside [0, 1]"
        )));
    }
    let len = seq.ids.len();
    let mut prev = 0usize;
    for &b in word_boundaries {
        if b == 0 || b >= len || (prev > 0 && b <= prev) {
            return Err(Error::InvalidArgument(format!(
                "word boundary {b} is not a strictly increasing interior position"
            )));
        }
        prev = b;
    }

    let sil = inventory.sil();
    let mut out = Vec::with_capacity(len + word_boundaries.len() + 2);
    out.push(sil);
    let mut next_boundary = word_boundaries.iter().copied().peekable();
    for (i, &id) in seq.ids.iter().enumerate() {
        if next_boundary.peek() == Some(&i) {
            next_boundary.next();
            if rng.bernoulli(rate) {
                out.push(sil);
            }
        }
        out.push(id);
    }
    out.push(sil);
    Ok(PhonemeSequence {
        ids: out,
        origin: seq.origin.clone(),
    })
}

/// Incremental inventory builder for streams of phoneme labels where no
/// lexicon is available. `SIL` is pre-registered at id 0; further ids are
/// assigned in order of first appearance.
#[derive(Debug)]
pub struct InventoryBuilder {
    labels: Vec<String>,
    index: HashMap<String, PhonemeId>,
}

impl InventoryBuilder {
    pub fn new() -> Self {
        let mut b = InventoryBuilder {
            labels: Vec::new(),
            index: HashMap::new(),
        };
        b.labels.push(SIL_LABEL.to_string());
        b.index.insert(SIL_LABEL.to_string(), PhonemeId(0));
        b
    }

    pub fn intern(&mut self, label: &str) -> Result<PhonemeId> {
        if let Some(&id) = self.index.get(label) {
            return Ok(id);
        }
        if label.is_empty() {
            return Err(Error::InvalidArgument("empty phoneme label".into()));
        }
        if self.labels.len() >= usize::from(u16::MAX) {
            return Err(Error::InvalidArgument(
                "inventory exceeds 65535 phonemes".into(),
            ));
        }
        let id = PhonemeId(self.labels.len() as u16);
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        Ok(id)
    }

    pub fn sil(&self) -> PhonemeId {
        PhonemeId(0)
    }

    pub fn finish(self) -> Result<PhonemeInventory> {
        PhonemeInventory::from_labels(self.labels)
    }
}

impl Default for InventoryBuilder {
    fn default() -> Self {
        Self::new()
    }
}
