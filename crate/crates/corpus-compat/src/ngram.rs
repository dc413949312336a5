//! Exact, mergeable n-gram counting over phoneme streams (orders 1-4).
//!
//! Keys pack up to four 16-bit phoneme ids into one 64-bit word with the
//! first id in the most significant position, so numeric key order equals
//! lexicographic id order. Windows never cross sequence boundaries and no
//! padding tokens are injected. Memory grows with the number of distinct
//! n-grams, not with corpus size.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::hash::PackedMap;
use crate::phonemizer::{fingerprint_labels, PhonemeId, PhonemeInventory, PhonemeSequence};

/// Highest supported n-gram order.
pub const MAX_ORDER: u8 = 4;

/// Per-order masks selecting the low 16*n bits of a packed window.
const MASKS: [u64; 5] = [
    0,
    0xffff,
    0xffff_ffff,
    0xffff_ffff_ffff,
    u64::MAX,
];

fn check_order(order: u8) -> Result<()> {
    if (1..=MAX_ORDER).contains(&order) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "n-gram order {order} outside 1..={MAX_ORDER}"
        )))
    }
}

/// A fixed-width packed n-gram key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NGramKey {
    order: u8,
    packed: u64,
}

impl NGramKey {
    pub fn pack(ids: &[PhonemeId]) -> Result<Self> {
        check_order(ids.len() as u8)?;
        let mut packed = 0u64;
        for id in ids {
            packed = (packed << 16) | u64::from(id.0);
        }
        Ok(NGramKey {
            order: ids.len() as u8,
            packed,
        })
    }

    pub fn from_packed(order: u8, packed: u64) -> Result<Self> {
        check_order(order)?;
        if order < MAX_ORDER && packed >> (16 * u32::from(order)) != 0 {
            return Err(Error::InvalidArgument(format!(
                "packed value {packed:#x} has bits beyond order {order}"
            )));
        }
        Ok(NGramKey { order, packed })
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn packed(&self) -> u64 {
        self.packed
    }

    pub fn unpack(&self) -> Vec<PhonemeId> {
        let n = usize::from(self.order);
        let mut ids = vec![PhonemeId(0); n];
        for (i, slot) in ids.iter_mut().enumerate() {
            let shift = 16 * (n - 1 - i) as u32;
            *slot = PhonemeId(((self.packed >> shift) & 0xffff) as u16);
        }
        ids
    }

    /// Space-joined labels, for report output.
    pub fn label_string(&self, inventory: &PhonemeInventory) -> String {
        self.unpack()
            .iter()
            .map(|&id| inventory.label(id).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Exact n-gram counts for all orders 1..=n_max over one inventory.
#[derive(Clone, Debug)]
pub struct NGramCountTable {
    fingerprint: u64,
    include_sil: bool,
    n_max: u8,
    counts: [PackedMap<u64>; MAX_ORDER as usize],
    totals: [u64; MAX_ORDER as usize],
}

impl NGramCountTable {
    /// Empty table (the merge identity) for a given inventory context.
    pub fn empty(fingerprint: u64, include_sil: bool, n_max: u8) -> Result<Self> {
        check_order(n_max)?;
        Ok(NGramCountTable {
            fingerprint,
            include_sil,
            n_max,
            counts: std::array::from_fn(|_| PackedMap::default()),
            totals: [0; MAX_ORDER as usize],
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn include_sil(&self) -> bool {
        self.include_sil
    }

    pub fn n_max(&self) -> u8 {
        self.n_max
    }

    /// Window count at one order (sum of all counts).
    pub fn total(&self, order: u8) -> u64 {
        if check_order(order).is_ok() {
            self.totals[usize::from(order) - 1]
        } else {
            0
        }
    }

    /// Number of distinct n-grams at one order.
    pub fn distinct(&self, order: u8) -> usize {
        if check_order(order).is_ok() {
            self.counts[usize::from(order) - 1].len()
        } else {
            0
        }
    }

    pub fn count(&self, key: &NGramKey) -> u64 {
        self.counts[usize::from(key.order) - 1]
            .get(&key.packed)
            .copied()
            .unwrap_or(0)
    }

    /// (packed key, count) pairs at one order, ascending by key.
    pub fn sorted_entries(&self, order: u8) -> Vec<(u64, u64)> {
        if check_order(order).is_err() {
            return Vec::new();
        }
        let mut v: Vec<(u64, u64)> = self.counts[usize::from(order) - 1]
            .iter()
            .map(|(&k, &c)| (k, c))
            .collect();
        v.sort_unstable_by_key(|&(k, _)| k);
        v
    }

    /// Rough bytes allocated by the count maps (hash buckets + entries).
    /// Used to verify the memory-per-distinct-key bound.
    pub fn approx_mem_bytes(&self) -> usize {
        let mut bytes = std::mem::size_of::<Self>();
        for map in &self.counts {
            if map.capacity() > 0 {
                // hashbrown allocates pow2 buckets at 7/8 max load; each
                // bucket holds one (u64, u64) entry plus one control byte.
                let buckets = (map.capacity() * 8 / 7 + 1).next_power_of_two();
                bytes += buckets * (std::mem::size_of::<(u64, u64)>() + 1);
            }
        }
        bytes
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::TableMismatch(format!(
                "inventory fingerprints differ ({:#018x} vs {:#018x})",
                self.fingerprint, other.fingerprint
            )));
        }
        if self.include_sil != other.include_sil {
            return Err(Error::TableMismatch(
                "include_sil settings differ".into(),
            ));
        }
        if self.n_max != other.n_max {
            return Err(Error::TableMismatch(format!(
                "n_max differs ({} vs {})",
                self.n_max, other.n_max
            )));
        }
        Ok(())
    }
}

/// Streaming counter. Feed sequences, then `finish` with the inventory
/// fingerprint the ids came from.
#[derive(Debug)]
pub struct NGramCounter {
    n_max: u8,
    include_sil: bool,
    sil: PhonemeId,
    counts: [PackedMap<u64>; MAX_ORDER as usize],
    totals: [u64; MAX_ORDER as usize],
    scratch: Vec<u16>,
}

impl NGramCounter {
    pub fn new(n_max: u8, include_sil: bool, sil: PhonemeId) -> Result<Self> {
        check_order(n_max)?;
        Ok(NGramCounter {
            n_max,
            include_sil,
            sil,
            counts: std::array::from_fn(|_| PackedMap::default()),
            totals: [0; MAX_ORDER as usize],
            scratch: Vec::new(),
        })
    }

    pub fn add_ids(&mut self, ids: &[PhonemeId]) {
        self.scratch.clear();
        if self.include_sil {
            self.scratch.extend(ids.iter().map(|id| id.0));
        } else {
            self.scratch
                .extend(ids.iter().filter(|&&id| id != self.sil).map(|id| id.0));
        }
        let n_max = usize::from(self.n_max);
        let mut window = 0u64;
        for (i, &id) in self.scratch.iter().enumerate() {
            window = (window << 16) | u64::from(id);
            let lim = (i + 1).min(n_max);
            for n in 1..=lim {
                *self.counts[n - 1].entry(window & MASKS[n]).or_insert(0) += 1;
                self.totals[n - 1] += 1;
            }
        }
    }

    pub fn finish(self, fingerprint: u64) -> NGramCountTable {
        NGramCountTable {
            fingerprint,
            include_sil: self.include_sil,
            n_max: self.n_max,
            counts: self.counts,
            totals: self.totals,
        }
    }
}

/// Count all n-grams of orders 1..=n_max in one pass. Windows never cross
/// sequence boundaries; with `include_sil` off, SIL ids are removed from
/// each sequence before counting. Ids outside the inventory are rejected.
pub fn count_ngrams<'a, I>(
    sequences: I,
    inventory: &PhonemeInventory,
    n_max: u8,
    include_sil: bool,
) -> Result<NGramCountTable>
where
    I: IntoIterator<Item = &'a PhonemeSequence>,
{
    let mut counter = NGramCounter::new(n_max, include_sil, inventory.sil())?;
    let limit = inventory.len() as u16;
    for seq in sequences {
        if let Some(bad) = seq.ids.iter().find(|id| id.0 >= limit) {
            return Err(Error::Data(format!(
                "phoneme id {} outside inventory of size {} (mixed inventories?){}",
                bad.0,
                limit,
                seq.origin
                    .as_deref()
                    .map(|o| format!(" in {o}"))
                    .unwrap_or_default()
            )));
        }
        counter.add_ids(&seq.ids);
    }
    Ok(counter.finish(inventory.fingerprint()))
}

/// Shard the corpus across threads, count shards independently, and merge.
/// The result is identical to a single-pass count.
pub fn count_ngrams_sharded(
    sequences: &[PhonemeSequence],
    inventory: &PhonemeInventory,
    n_max: u8,
    include_sil: bool,
    shards: usize,
) -> Result<NGramCountTable> {
    if shards == 0 {
        return Err(Error::InvalidArgument("shards must be >= 1".into()));
    }
    let chunk = sequences.len().div_ceil(shards).max(1);
    let tables: Vec<Result<NGramCountTable>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sequences
            .chunks(chunk)
            .map(|part| scope.spawn(move || count_ngrams(part, inventory, n_max, include_sil)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut acc = NGramCountTable::empty(inventory.fingerprint(), include_sil, n_max)?;
    for table in tables {
        acc = merge(acc, table?)?;
    }
    Ok(acc)
}

/// Exact per-key integer sum of two tables with identical settings.
pub fn merge(a: NGramCountTable, b: NGramCountTable) -> Result<NGramCountTable> {
    a.check_compatible(&b)?;
    // Drain the smaller table into the larger one.
    let (mut big, small) = if a.totals.iter().sum::<u64>() >= b.totals.iter().sum::<u64>() {
        (a, b)
    } else {
        (b, a)
    };
    for order in 0..usize::from(MAX_ORDER) {
        for (k, c) in small.counts[order].iter() {
            let slot = big.counts[order].entry(*k).or_insert(0);
            *slot = slot
                .checked_add(*c)
                .ok_or_else(|| Error::Data("n-gram count overflow".into()))?;
        }
        big.totals[order] = big.totals[order]
            .checked_add(small.totals[order])
            .ok_or_else(|| Error::Data("n-gram total overflow".into()))?;
    }
    Ok(big)
}

/// A normalized probability distribution over the n-grams of one order.
/// Entries are sorted by packed key, making downstream float accumulation
/// order-independent of hash map internals.
#[derive(Clone, Debug)]
pub struct NGramDistribution {
    order: u8,
    fingerprint: u64,
    include_sil: bool,
    total: u64,
    entries: Vec<(u64, f64)>,
}

impl NGramDistribution {
    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn include_sil(&self) -> bool {
        self.include_sil
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn support_size(&self) -> usize {
        self.entries.len()
    }

    /// Sorted (packed key, probability) pairs.
    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn probability(&self, key: &NGramKey) -> Option<f64> {
        if key.order != self.order {
            return None;
        }
        self.entries
            .binary_search_by_key(&key.packed, |&(k, _)| k)
            .ok()
            .map(|i| self.entries[i].1)
    }
}

/// Normalize one order of a count table into a probability distribution.
/// No smoothing is applied.
pub fn to_distribution(table: &NGramCountTable, order: u8) -> Result<NGramDistribution> {
    check_order(order)?;
    let total = table.total(order);
    if total == 0 {
        return Err(Error::EmptyDistribution(order));
    }
    let denom = total as f64;
    let entries: Vec<(u64, f64)> = table
        .sorted_entries(order)
        .into_iter()
        .map(|(k, c)| (k, c as f64 / denom))
        .collect();
    Ok(NGramDistribution {
        order,
        fingerprint: table.fingerprint(),
        include_sil: table.include_sil(),
        total,
        entries,
    })
}

/// Top-k entries by probability, ties broken by ascending packed key.
pub fn top_k(dist: &NGramDistribution, k: usize) -> Vec<(NGramKey, f64)> {
    let mut sorted: Vec<(u64, f64)> = dist.entries.clone();
    sorted.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("probabilities are finite")
            .then(a.0.cmp(&b.0))
    });
    sorted
        .into_iter()
        .take(k)
        .map(|(packed, p)| {
            (
                NGramKey {
                    order: dist.order,
                    packed,
                },
                p,
            )
        })
        .collect()
}

// --- binary serialization ---------------------------------------------------

const MAGIC: [u8; 4] = *b"PNGC";
const FORMAT_VERSION: u16 = 1;

impl NGramCountTable {
    /// Encode to the canonical binary form: a fixed header followed by
    /// per-order key-ascending (key, count) pairs, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let entries: usize = (1..=MAX_ORDER).map(|o| self.distinct(o)).sum();
        let mut out = Vec::with_capacity(80 + entries * 16);
        out.extend_from_slice(&MAGIC);
        out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u8(u8::from(self.include_sil)).unwrap();
        out.write_u8(self.n_max).unwrap();
        out.write_u64::<LittleEndian>(self.fingerprint).unwrap();
        for order in 1..=MAX_ORDER {
            out.write_u64::<LittleEndian>(self.distinct(order) as u64)
                .unwrap();
        }
        for order in 1..=MAX_ORDER {
            out.write_u64::<LittleEndian>(self.total(order)).unwrap();
        }
        for order in 1..=MAX_ORDER {
            for (k, c) in self.sorted_entries(order) {
                out.write_u64::<LittleEndian>(k).unwrap();
                out.write_u64::<LittleEndian>(c).unwrap();
            }
        }
        out
    }

    /// Decode and fully validate the canonical binary form. Accepts exactly
    /// the bytes `encode` produces: any structural deviation (bad magic,
    /// unsorted keys, zero counts, total mismatch, trailing bytes) is
    /// rejected, so decode-then-encode is the identity on accepted inputs.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptTable(msg.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r
            .read_u16::<LittleEndian>()
            .map_err(|_| corrupt("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptTable(format!(
                "unsupported format version {version}"
            )));
        }
        let flags = r.read_u8().map_err(|_| corrupt("truncated header"))?;
        if flags > 1 {
            return Err(corrupt("unknown flag bits"));
        }
        let include_sil = flags == 1;
        let n_max = r.read_u8().map_err(|_| corrupt("truncated header"))?;
        if check_order(n_max).is_err() {
            return Err(corrupt("n_max outside 1..=4"));
        }
        let fingerprint = r
            .read_u64::<LittleEndian>()
            .map_err(|_| corrupt("truncated header"))?;
        let mut distinct = [0u64; MAX_ORDER as usize];
        for d in distinct.iter_mut() {
            *d = r
                .read_u64::<LittleEndian>()
                .map_err(|_| corrupt("truncated header"))?;
        }
        let mut totals = [0u64; MAX_ORDER as usize];
        for t in totals.iter_mut() {
            *t = r
                .read_u64::<LittleEndian>()
                .map_err(|_| corrupt("truncated header"))?;
        }

        let body_entries: u64 = distinct.iter().sum();
        if body_entries > (r.len() as u64) / 16 {
            return Err(corrupt("declared entries exceed available bytes"));
        }

        let mut counts: [PackedMap<u64>; MAX_ORDER as usize] =
            std::array::from_fn(|_| PackedMap::default());
        for order in 1..=MAX_ORDER {
            let idx = usize::from(order) - 1;
            if order > n_max && (distinct[idx] != 0 || totals[idx] != 0) {
                return Err(corrupt("entries present beyond n_max"));
            }
            let n = distinct[idx] as usize;
            counts[idx].reserve(n);
            let mut prev: Option<u64> = None;
            let mut sum = 0u64;
            for _ in 0..n {
                let key = r
                    .read_u64::<LittleEndian>()
                    .map_err(|_| corrupt("truncated entries"))?;
                let count = r
                    .read_u64::<LittleEndian>()
                    .map_err(|_| corrupt("truncated entries"))?;
                if order < MAX_ORDER && key >> (16 * u32::from(order)) != 0 {
                    return Err(corrupt("key has bits beyond its order"));
                }
                if let Some(p) = prev {
                    if key <= p {
                        return Err(corrupt("keys not strictly ascending"));
                    }
                }
                if count == 0 {
                    return Err(corrupt("zero count entry"));
                }
                sum = sum
                    .checked_add(count)
                    .ok_or_else(|| corrupt("count sum overflow"))?;
                prev = Some(key);
                counts[idx].insert(key, count);
            }
            if sum != totals[idx] {
                return Err(corrupt("total does not match sum of counts"));
            }
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(NGramCountTable {
            fingerprint,
            include_sil,
            n_max,
            counts,
            totals,
        })
    }
}

/// Sidecar metadata written next to the binary table.
#[derive(Debug, Serialize, Deserialize)]
pub struct TableSidecar {
    pub version: u16,
    pub fingerprint: String,
    pub include_sil: bool,
    pub n_max: u8,
    pub labels: Vec<String>,
    pub totals: HashMap<String, u64>,
    pub distinct: HashMap<String, u64>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write the binary table plus a `<path>.json` sidecar with the inventory
/// labels and per-order summary.
pub fn save_table(path: &Path, table: &NGramCountTable, labels: &[String]) -> Result<()> {
    std::fs::write(path, table.encode()).map_err(|e| io_err(path, e))?;
    let sidecar = TableSidecar {
        version: FORMAT_VERSION,
        fingerprint: format!("{:#018x}", table.fingerprint()),
        include_sil: table.include_sil(),
        n_max: table.n_max(),
        labels: labels.to_vec(),
        totals: (1..=MAX_ORDER)
            .map(|o| (o.to_string(), table.total(o)))
            .collect(),
        distinct: (1..=MAX_ORDER)
            .map(|o| (o.to_string(), table.distinct(o) as u64))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&serde_json::to_value(&sidecar).expect("serializable"))
        .expect("serializable");
    let sp = sidecar_path(path);
    std::fs::write(&sp, json + "\n").map_err(|e| io_err(&sp, e))
}

/// Load a binary table; returns the inventory labels when the sidecar is
/// present (and validates them against the table fingerprint).
pub fn load_table(path: &Path) -> Result<(NGramCountTable, Option<Vec<String>>)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let table = NGramCountTable::decode(&bytes)?;
    let sp = sidecar_path(path);
    if !sp.exists() {
        return Ok((table, None));
    }
    let text = std::fs::read_to_string(&sp).map_err(|e| io_err(&sp, e))?;
    let sidecar: TableSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
        source_name: sp.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if fingerprint_labels(&sidecar.labels) != table.fingerprint() {
        return Err(Error::Data(format!(
            "sidecar labels in {} do not match the table fingerprint",
            sp.display()
        )));
    }
    Ok((table, Some(sidecar.labels)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn inv(labels: &[&str]) -> PhonemeInventory {
        PhonemeInventory::from_labels(labels.iter().copied()).unwrap()
    }

    fn seq(inv: &PhonemeInventory, labels: &[&str]) -> PhonemeSequence {
        PhonemeSequence::new(labels.iter().map(|l| inv.id(l).unwrap()).collect())
    }

    fn key(inv: &PhonemeInventory, labels: &[&str]) -> NGramKey {
        let ids: Vec<PhonemeId> = labels.iter().map(|l| inv.id(l).unwrap()).collect();
        NGramKey::pack(&ids).unwrap()
    }

    /// Quadratic reference counter: concatenates nothing, enumerates every
    /// window of every sequence.
    fn brute_counts(
        seqs: &[PhonemeSequence],
        sil: PhonemeId,
        n: usize,
        include_sil: bool,
    ) -> BTreeMap<Vec<u16>, u64> {
        let mut out = BTreeMap::new();
        for s in seqs {
            let ids: Vec<u16> = s
                .ids
                .iter()
                .filter(|&&id| include_sil || id != sil)
                .map(|id| id.0)
                .collect();
            if ids.len() < n {
                continue;
            }
            for w in ids.windows(n) {
                *out.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        out
    }

    #[test]
    fn counts_single_sequence() {
        let inv = inv(&["A", "B"]);
        let s = seq(&inv, &["A", "B", "A"]);
        let t = count_ngrams([&s], &inv, 2, true).unwrap();
        assert_eq!(t.count(&key(&inv, &["A"])), 2);
        assert_eq!(t.count(&key(&inv, &["B"])), 1);
        assert_eq!(t.count(&key(&inv, &["A", "B"])), 1);
        assert_eq!(t.count(&key(&inv, &["B", "A"])), 1);
        assert_eq!(t.count(&key(&inv, &["A", "A"])), 0);
        assert_eq!(t.total(1), 3);
        assert_eq!(t.total(2), 2);
    }

    #[test]
    fn short_sequence_has_empty_high_orders() {
        let inv = inv(&["A", "B", "C"]);
        let s = seq(&inv, &["A", "B", "C"]);
        let t = count_ngrams([&s], &inv, 4, true).unwrap();
        assert_eq!(t.total(4), 0);
        assert_eq!(t.distinct(4), 0);
        assert_eq!(t.total(3), 1);
    }

    #[test]
    fn windows_never_cross_sequence_boundaries() {
        let inv = inv(&["A", "B"]);
        let s1 = seq(&inv, &["A", "B"]);
        let s2 = seq(&inv, &["B", "A"]);
        let t = count_ngrams([&s1, &s2], &inv, 2, true).unwrap();
        assert_eq!(t.count(&key(&inv, &["A", "B"])), 1);
        assert_eq!(t.count(&key(&inv, &["B", "A"])), 1);
        assert_eq!(t.count(&key(&inv, &["B", "B"])), 0);
        assert_eq!(t.total(2), 2);
    }

    #[test]
    fn include_sil_off_removes_sil_before_counting() {
        let inv = inv(&["A", "B"]);
        let s = seq(&inv, &["SIL", "A", "SIL", "B", "SIL"]);
        let without = count_ngrams([&s], &inv, 2, false).unwrap();
        assert_eq!(without.count(&key(&inv, &["A", "B"])), 1);
        assert_eq!(without.total(1), 2);
        let with = count_ngrams([&s], &inv, 2, true).unwrap();
        assert_eq!(with.count(&key(&inv, &["A", "B"])), 0);
        assert_eq!(with.total(1), 5);
    }

    #[test]
    fn out_of_inventory_id_is_rejected() {
        let inv = inv(&["A"]);
        let s = PhonemeSequence::new(vec![PhonemeId(999)]);
        assert!(matches!(
            count_ngrams([&s], &inv, 1, true),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let inv = inv(&["A", "B"]);
        let s = seq(&inv, &["A", "B", "A"]);
        let t = count_ngrams([&s], &inv, 2, true).unwrap();
        let e = NGramCountTable::empty(inv.fingerprint(), true, 2).unwrap();
        let m = merge(t.clone(), e).unwrap();
        for order in 1..=2 {
            assert_eq!(m.sorted_entries(order), t.sorted_entries(order));
            assert_eq!(m.total(order), t.total(order));
        }
    }

    #[test]
    fn merge_is_commutative() {
        let inv = inv(&["A", "B", "C"]);
        let a = count_ngrams([&seq(&inv, &["A", "B", "C", "A"])], &inv, 3, true).unwrap();
        let b = count_ngrams([&seq(&inv, &["C", "C", "B"])], &inv, 3, true).unwrap();
        let ab = merge(a.clone(), b.clone()).unwrap();
        let ba = merge(b, a).unwrap();
        for order in 1..=3 {
            assert_eq!(ab.sorted_entries(order), ba.sorted_entries(order));
        }
    }

    #[test]
    fn merge_rejects_mismatched_settings() {
        let inv_a = inv(&["A"]);
        let inv_b = inv(&["B"]);
        let ta = NGramCountTable::empty(inv_a.fingerprint(), true, 2).unwrap();
        let tb = NGramCountTable::empty(inv_b.fingerprint(), true, 2).unwrap();
        assert!(matches!(merge(ta, tb), Err(Error::TableMismatch(_))));
        let ta = NGramCountTable::empty(inv_a.fingerprint(), true, 2).unwrap();
        let tc = NGramCountTable::empty(inv_a.fingerprint(), false, 2).unwrap();
        assert!(matches!(merge(ta, tc), Err(Error::TableMismatch(_))));
    }

    #[test]
    fn sharded_count_equals_single_pass() {
        let inv = inv(&["A", "B", "C", "D"]);
        let seqs: Vec<PhonemeSequence> = (0..100)
            .map(|i| {
                let labels = ["A", "B", "C", "D"];
                PhonemeSequence::new(
                    (0..(i % 13 + 1))
                        .map(|j| inv.id(labels[(i + j) % 4]).unwrap())
                        .collect(),
                )
            })
            .collect();
        let single = count_ngrams(seqs.iter(), &inv, 4, true).unwrap();
        for shards in [1, 3, 7] {
            let sharded = count_ngrams_sharded(&seqs, &inv, 4, true, shards).unwrap();
            for order in 1..=4 {
                assert_eq!(sharded.sorted_entries(order), single.sorted_entries(order));
            }
        }
    }

    #[test]
    fn distribution_normalizes() {
        let inv = inv(&["A", "B"]);
        let s = seq(&inv, &["A", "A", "B"]);
        let t = count_ngrams([&s], &inv, 1, true).unwrap();
        let d = to_distribution(&t, 1).unwrap();
        assert!((d.probability(&key(&inv, &["A"])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.probability(&key(&inv, &["B"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_support_distribution_is_one() {
        let inv = inv(&["X"]);
        let s = seq(&inv, &["X", "X", "X", "X", "X"]);
        let t = count_ngrams([&s], &inv, 1, true).unwrap();
        let d = to_distribution(&t, 1).unwrap();
        assert_eq!(d.support_size(), 1);
        assert_eq!(d.entries()[0].1, 1.0);
    }

    #[test]
    fn empty_order_is_an_error() {
        let inv = inv(&["A"]);
        let t = NGramCountTable::empty(inv.fingerprint(), true, 4).unwrap();
        assert!(matches!(
            to_distribution(&t, 1),
            Err(Error::EmptyDistribution(1))
        ));
    }

    #[test]
    fn top_k_orders_by_probability_then_key() {
        let inv = inv(&["A", "B", "C"]);
        // A:5 B:3 C:2 -> probabilities 0.5, 0.3, 0.2
        let s = seq(&inv, &["A", "A", "A", "A", "A", "B", "B", "B", "C", "C"]);
        let t = count_ngrams([&s], &inv, 1, true).unwrap();
        let d = to_distribution(&t, 1).unwrap();
        let top = top_k(&d, 2);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].0, key(&inv, &["A"]));
        assert!((top[0].1 - 0.5).abs() < 1e-15);
        assert_eq!(top[1].0, key(&inv, &["B"]));
        // k beyond support returns the whole support.
        assert_eq!(top_k(&d, 10).len(), 3);
    }

    #[test]
    fn top_k_ties_break_by_packed_key() {
        let inv = inv(&["A", "B", "C", "D"]);
        let s = seq(&inv, &["D", "C", "B", "A"]);
        let t = count_ngrams([&s], &inv, 1, true).unwrap();
        let d = to_distribution(&t, 1).unwrap();
        let top = top_k(&d, 4);
        let keys: Vec<u64> = top.iter().map(|(k, _)| k.packed()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn key_pack_unpack_roundtrip() {
        let ids = vec![PhonemeId(1), PhonemeId(65534), PhonemeId(0), PhonemeId(7)];
        let k = NGramKey::pack(&ids).unwrap();
        assert_eq!(k.unpack(), ids);
        assert!(NGramKey::pack(&[]).is_err());
        assert!(NGramKey::pack(&vec![PhonemeId(0); 5]).is_err());
    }

    #[test]
    fn keys_of_different_orders_never_equal() {
        let a = NGramKey::from_packed(1, 0).unwrap();
        let b = NGramKey::from_packed(2, 0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let inv = inv(&["A", "B", "C"]);
        let s1 = seq(&inv, &["A", "B", "C", "A", "B"]);
        let s2 = seq(&inv, &["C", "C", "SIL", "A"]);
        let t = count_ngrams([&s1, &s2], &inv, 4, false).unwrap();
        let bytes = t.encode();
        let back = NGramCountTable::decode(&bytes).unwrap();
        assert_eq!(back.fingerprint(), t.fingerprint());
        assert_eq!(back.include_sil(), t.include_sil());
        assert_eq!(back.n_max(), t.n_max());
        for order in 1..=4 {
            assert_eq!(back.sorted_entries(order), t.sorted_entries(order));
            assert_eq!(back.total(order), t.total(order));
        }
        // Canonical: re-encode is byte-identical.
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn decode_rejects_corruption() {
        let inv = inv(&["A", "B"]);
        let s = seq(&inv, &["A", "B", "A"]);
        let t = count_ngrams([&s], &inv, 2, true).unwrap();
        let good = t.encode();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(NGramCountTable::decode(&bad_magic).is_err());

        assert!(NGramCountTable::decode(&good[..good.len() - 1]).is_err());
        assert!(NGramCountTable::decode(&[]).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(NGramCountTable::decode(&trailing).is_err());

        // Flip a count to zero.
        let mut zero_count = good.clone();
        let count_off = good.len() - 8;
        zero_count[count_off..].fill(0);
        assert!(NGramCountTable::decode(&zero_count).is_err());
    }

    #[test]
    fn save_load_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let inv = inv(&["A", "B"]);
        let s = seq(&inv, &["A", "B", "A"]);
        let t = count_ngrams([&s], &inv, 2, true).unwrap();
        let path = dir.path().join("t.bin");
        save_table(&path, &t, inv.labels()).unwrap();
        assert!(path.with_extension("bin.json").exists() || sidecar_path(&path).exists());
        let (back, labels) = load_table(&path).unwrap();
        assert_eq!(back.total(1), 3);
        assert_eq!(labels.unwrap(), inv.labels());
    }

    proptest! {
        /// Counting matches the quadratic brute-force enumerator exactly.
        #[test]
        fn prop_counts_match_brute_force(
            corpus in proptest::collection::vec(
                proptest::collection::vec(0u16..6, 0..30), 0..20),
            include_sil in proptest::bool::ANY,
        ) {
            let inv = PhonemeInventory::from_labels(
                ["A", "B", "C", "D", "E", "SIL"]).unwrap();
            let seqs: Vec<PhonemeSequence> = corpus
                .iter()
                .map(|ids| PhonemeSequence::new(ids.iter().map(|&i| PhonemeId(i)).collect()))
                .collect();
            let t = count_ngrams(seqs.iter(), &inv, 4, include_sil).unwrap();
            for n in 1..=4usize {
                let brute = brute_counts(&seqs, inv.sil(), n, include_sil);
                prop_assert_eq!(t.total(n as u8), brute.values().sum::<u64>());
                prop_assert_eq!(t.distinct(n as u8), brute.len());
                for (ids, c) in &brute {
                    let k = NGramKey::pack(
                        &ids.iter().map(|&i| PhonemeId(i)).collect::<Vec<_>>())
                        .unwrap();
                    prop_assert_eq!(t.count(&k), *c);
                }
            }
        }

        /// Window identity: total(n) = sum over sequences of max(0, L - n + 1).
        #[test]
        fn prop_window_identity(
            lens in proptest::collection::vec(0usize..50, 0..20),
        ) {
            let inv = PhonemeInventory::from_labels(["A"]).unwrap();
            let seqs: Vec<PhonemeSequence> = lens
                .iter()
                .map(|&l| PhonemeSequence::new(vec![PhonemeId(0); l]))
                .collect();
            let t = count_ngrams(seqs.iter(), &inv, 4, true).unwrap();
            for n in 1..=4usize {
                let expect: u64 = lens.iter()
                    .map(|&l| l.saturating_sub(n - 1) as u64)
                    .sum();
                prop_assert_eq!(t.total(n as u8), expect);
            }
        }

        /// Merging a random sharding equals the single-pass count.
        #[test]
        fn prop_merge_monoid(
            corpus in proptest::collection::vec(
                proptest::collection::vec(0u16..5, 1..20), 1..30),
            cut_a in 0usize..30,
            cut_b in 0usize..30,
        ) {
            let inv = PhonemeInventory::from_labels(["A", "B", "C", "D"]).unwrap();
            let seqs: Vec<PhonemeSequence> = corpus
                .iter()
                .map(|ids| PhonemeSequence::new(
                    ids.iter().map(|&i| PhonemeId(i % 4)).collect()))
                .collect();
            let single = count_ngrams(seqs.iter(), &inv, 3, true).unwrap();
            let a = cut_a.min(seqs.len());
            let b = cut_b.min(seqs.len()).max(a);
            let t1 = count_ngrams(seqs[..a].iter(), &inv, 3, true).unwrap();
            let t2 = count_ngrams(seqs[a..b].iter(), &inv, 3, true).unwrap();
            let t3 = count_ngrams(seqs[b..].iter(), &inv, 3, true).unwrap();
            let merged = merge(merge(t1, t2).unwrap(), t3).unwrap();
            for order in 1..=3 {
                prop_assert_eq!(merged.sorted_entries(order), single.sorted_entries(order));
            }
        }

        /// include_sil=off equals counting with SIL pre-removed.
        #[test]
        fn prop_sil_off_equals_prestripped(
            corpus in proptest::collection::vec(
                proptest::collection::vec(0u16..4, 0..25), 0..15),
        ) {
            let inv = PhonemeInventory::from_labels(["SIL", "A", "B", "C"]).unwrap();
            let seqs: Vec<PhonemeSequence> = corpus
                .iter()
                .map(|ids| PhonemeSequence::new(ids.iter().map(|&i| PhonemeId(i)).collect()))
                .collect();
            let stripped: Vec<PhonemeSequence> = seqs
                .iter()
                .map(|s| PhonemeSequence::new(
                    s.ids.iter().copied().filter(|&id| id != inv.sil()).collect()))
                .collect();
            let off = count_ngrams(seqs.iter(), &inv, 4, false).unwrap();
            let pre = count_ngrams(stripped.iter(), &inv, 4, true).unwrap();
            for order in 1..=4 {
                prop_assert_eq!(off.sorted_entries(order), pre.sorted_entries(order));
                prop_assert_eq!(off.total(order), pre.total(order));
            }
        }

        /// Distributions sum to 1 within 1e-12 (compensated check).
        #[test]
        fn prop_distribution_sums_to_one(
            ids in proptest::collection::vec(0u16..50, 1..1000),
        ) {
            let labels: Vec<String> = (0..50).map(|i| format!("P{i}")).collect();
            let inv = PhonemeInventory::from_labels(labels).unwrap();
            let s = PhonemeSequence::new(ids.iter().map(|&i| PhonemeId(i)).collect());
            let t = count_ngrams([&s], &inv, 2, true).unwrap();
            for order in 1..=2u8 {
                if t.total(order) == 0 { continue; }
                let d = to_distribution(&t, order).unwrap();
                let mut sum = 0.0f64;
                let mut c = 0.0f64;
                for &(_, p) in d.entries() {
                    let t2 = sum + p;
                    if sum.abs() >= p.abs() {
                        c += (sum - t2) + p;
                    } else {
                        c += (p - t2) + sum;
                    }
                    sum = t2;
                }
                prop_assert!(((sum + c) - 1.0).abs() < 1e-12);
            }
        }
    }
}
