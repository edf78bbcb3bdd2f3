//! Transaction corpora: parsing, filtering, clipping, splitting and the
//! two-basket toy corpus.
//!
//! Input is plain text with one basket per line and whitespace-separated
//! non-negative integer item ids. Ids are remapped to dense indices in
//! ascending id order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{DppError, Result};
use crate::factor::Basket;
use crate::negatives::EmpiricalStats;
use crate::rng::DppRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Bijection between original item ids and dense indices `0..M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    ids: Vec<u64>,
    index: BTreeMap<u64, usize>,
}

impl Catalog {
    /// Builds a catalog from ids; order is ascending id.
    pub fn from_ids(ids: impl IntoIterator<Item = u64>) -> Self {
        let set: BTreeSet<u64> = ids.into_iter().collect();
        let ids: Vec<u64> = set.into_iter().collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Catalog { ids, index }
    }

    /// Builds a catalog whose dense index `i` maps to `ids[i]`.
    pub fn from_ordered(ids: Vec<u64>) -> Result<Self> {
        let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if index.len() != ids.len() {
            return Err(DppError::InvalidInput("catalog ids are not unique".into()));
        }
        Ok(Catalog { ids, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn id_of(&self, index: usize) -> u64 {
        self.ids[index]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}

/// Where a corpus came from and what loading did to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Non-empty lines read.
    pub raw_baskets: usize,
    /// Distinct item ids before any filtering.
    pub raw_items: usize,
    pub dropped_small: usize,
    pub clipped: usize,
    pub log: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub catalog: Catalog,
    pub baskets: Vec<Basket>,
    pub splits: Vec<Split>,
    /// Statistics over the training split only.
    pub stats: EmpiricalStats,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    /// Share of all baskets held out for testing.
    pub test: f64,
    /// Share of the remaining (non-test) baskets used for validation.
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            test: 0.2,
            validation: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub min_size: usize,
    /// Larger baskets are clipped to a seeded random subset of this size.
    pub max_size: Option<usize>,
    pub splits: SplitFractions,
    pub max_items: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            min_size: 2,
            max_size: None,
            splits: SplitFractions::default(),
            max_items: 10_000_000,
        }
    }
}

impl Corpus {
    pub fn num_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn split_baskets(&self, split: Split) -> Vec<Basket> {
        self.baskets
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(b, _)| b.clone())
            .collect()
    }

    pub fn train(&self) -> Vec<Basket> {
        self.split_baskets(Split::Train)
    }

    pub fn validation(&self) -> Vec<Basket> {
        self.split_baskets(Split::Validation)
    }

    pub fn test(&self) -> Vec<Basket> {
        self.split_baskets(Split::Test)
    }

    /// Builds a corpus from dense baskets with explicit split labels.
    pub fn from_parts(
        catalog: Catalog,
        baskets: Vec<Basket>,
        splits: Vec<Split>,
        provenance: Provenance,
    ) -> Result<Self> {
        if baskets.len() != splits.len() {
            return Err(DppError::InvalidInput("baskets and splits differ in length".into()));
        }
        for b in &baskets {
            b.check_range(catalog.len())?;
        }
        let train: Vec<Basket> = baskets
            .iter()
            .zip(&splits)
            .filter(|(_, &s)| s == Split::Train)
            .map(|(b, _)| b.clone())
            .collect();
        let stats = compute_stats(&train, catalog.len())?;
        Ok(Corpus {
            catalog,
            baskets,
            splits,
            stats,
            provenance,
        })
    }

    /// Writes `catalog.tsv`, `baskets.txt` and `splits.txt` into `dir`.
    /// Basket lines hold dense indices and align with split lines.
    pub fn save_canonical(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut catalog = String::new();
        for (i, id) in self.catalog.ids().iter().enumerate() {
            writeln!(catalog, "{i}\t{id}").unwrap();
        }
        let mut baskets = String::new();
        let mut splits = String::new();
        for (b, s) in self.baskets.iter().zip(&self.splits) {
            let line: Vec<String> = b.items().iter().map(|i| i.to_string()).collect();
            writeln!(baskets, "{}", line.join(" ")).unwrap();
            writeln!(splits, "{}", s.as_str()).unwrap();
        }
        fs::write(dir.join("catalog.tsv"), catalog)?;
        fs::write(dir.join("baskets.txt"), baskets)?;
        fs::write(dir.join("splits.txt"), splits)?;
        Ok(())
    }

    pub fn load_canonical(dir: &Path) -> Result<Self> {
        let catalog_path = dir.join("catalog.tsv");
        let mut ids = Vec::new();
        for (n, line) in fs::read_to_string(&catalog_path)?.lines().enumerate() {
            let err = |message: &str| DppError::Parse {
                path: catalog_path.clone(),
                line: n + 1,
                message: message.into(),
            };
            let (idx, id) = line.split_once('\t').ok_or_else(|| err("expected index<TAB>id"))?;
            let idx: usize = idx.parse().map_err(|_| err("bad index"))?;
            if idx != n {
                return Err(err("indices must be dense and in order"));
            }
            ids.push(id.parse::<u64>().map_err(|_| err("bad item id"))?);
        }
        let catalog = Catalog::from_ordered(ids)?;

        let baskets_path = dir.join("baskets.txt");
        let mut baskets = Vec::new();
        for (n, line) in fs::read_to_string(&baskets_path)?.lines().enumerate() {
            let items = parse_ids(line).map_err(|message| DppError::Parse {
                path: baskets_path.clone(),
                line: n + 1,
                message,
            })?;
            let basket = Basket::new(items.into_iter().map(|i| i as usize).collect()).map_err(|e| {
                DppError::Parse {
                    path: baskets_path.clone(),
                    line: n + 1,
                    message: e.to_string(),
                }
            })?;
            baskets.push(basket);
        }

        let splits_path = dir.join("splits.txt");
        let mut splits = Vec::new();
        for (n, line) in fs::read_to_string(&splits_path)?.lines().enumerate() {
            splits.push(Split::parse(line.trim()).ok_or_else(|| DppError::Parse {
                path: splits_path.clone(),
                line: n + 1,
                message: format!("unknown split {line:?}"),
            })?);
        }
        let provenance = Provenance {
            source: dir.display().to_string(),
            raw_baskets: baskets.len(),
            raw_items: catalog.len(),
            ..Provenance::default()
        };
        Corpus::from_parts(catalog, baskets, splits, provenance)
    }
}

fn parse_ids(line: &str) -> std::result::Result<Vec<u64>, String> {
    line.split_whitespace()
        .map(|tok| tok.parse::<u64>().map_err(|_| format!("not an item id: {tok:?}")))
        .collect()
}

/// Parses transactions text. `source` is only used in messages.
pub fn parse_transactions(
    text: &str,
    source: &Path,
    options: &LoadOptions,
    rng: &mut DppRng,
) -> Result<Corpus> {
    let mut raw: Vec<Vec<u64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ids = parse_ids(line).map_err(|message| DppError::Parse {
            path: source.to_path_buf(),
            line: n + 1,
            message,
        })?;
        ids.sort_unstable();
        ids.dedup();
        raw.push(ids);
    }
    if raw.is_empty() {
        return Err(DppError::InvalidInput(format!("{}: no transactions", source.display())));
    }
    let raw_items = raw.iter().flatten().collect::<BTreeSet<_>>().len();
    let mut provenance = Provenance {
        source: source.display().to_string(),
        raw_baskets: raw.len(),
        raw_items,
        ..Provenance::default()
    };

    let mut kept: Vec<Vec<u64>> = Vec::with_capacity(raw.len());
    for (n, ids) in raw.into_iter().enumerate() {
        if ids.len() < options.min_size {
            provenance.dropped_small += 1;
            continue;
        }
        match options.max_size {
            Some(max) if ids.len() > max => {
                let mut chosen: Vec<u64> = index::sample(rng, ids.len(), max).into_iter().map(|p| ids[p]).collect();
                chosen.sort_unstable();
                provenance.clipped += 1;
                provenance.log.push(format!("basket {n}: clipped {} -> {max} items", ids.len()));
                kept.push(chosen);
            }
            _ => kept.push(ids),
        }
    }
    if kept.is_empty() {
        return Err(DppError::InvalidInput(format!(
            "{}: no baskets with at least {} items",
            source.display(),
            options.min_size
        )));
    }

    let catalog = Catalog::from_ids(kept.iter().flatten().copied());
    if catalog.len() > options.max_items {
        return Err(DppError::InvalidInput(format!(
            "catalog of {} items exceeds the limit of {}",
            catalog.len(),
            options.max_items
        )));
    }
    let baskets: Vec<Basket> = kept
        .iter()
        .map(|ids| Basket::new(ids.iter().map(|&id| catalog.index_of(id).unwrap()).collect()))
        .collect::<Result<_>>()?;
    let splits = assign_splits(baskets.len(), options.splits, rng)?;
    Corpus::from_parts(catalog, baskets, splits, provenance)
}

pub fn load_transactions(path: &Path, options: &LoadOptions, rng: &mut DppRng) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_transactions(&text, path, options, rng)
}

/// Seeded split assignment: `round(test · n)` test baskets, then
/// `round(validation · rest)` validation baskets, the remainder training.
pub fn assign_splits(n: usize, fractions: SplitFractions, rng: &mut DppRng) -> Result<Vec<Split>> {
    if !(0.0..1.0).contains(&fractions.test) || !(0.0..1.0).contains(&fractions.validation) {
        return Err(DppError::InvalidInput(format!("bad split fractions {fractions:?}")));
    }
    let n_test = (fractions.test * n as f64).round() as usize;
    let n_val = (fractions.validation * (n - n_test) as f64).round() as usize;
    if n_test + n_val >= n {
        return Err(DppError::InvalidInput(format!("{n} baskets leave no training data")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_test] {
        splits[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        splits[i] = Split::Validation;
    }
    Ok(splits)
}

pub fn compute_stats(train: &[Basket], num_items: usize) -> Result<EmpiricalStats> {
    EmpiricalStats::from_baskets(train, num_items)
}

/// Largest basket over every split.
pub fn infer_rank(corpus: &Corpus) -> usize {
    corpus.baskets.iter().map(Basket::len).max().unwrap_or(1)
}

/// Copies of the baskets `{1, 2}` and `{3, 4}`, each replicated this many times.
pub const TOY_REPLICATES: usize = 1000;

/// The two-basket corpus: `{1, 2}` and `{3, 4}` replicated 1000 times each,
/// 20% held out for test and 10% of the rest for validation. Dense indices
/// 0..4 correspond to ids 1..4.
pub fn toy_corpus(rng: &mut DppRng) -> Result<Corpus> {
    let catalog = Catalog::from_ids([1, 2, 3, 4]);
    let mut baskets = Vec::with_capacity(2 * TOY_REPLICATES);
    for _ in 0..TOY_REPLICATES {
        baskets.push(Basket::new(vec![0, 1])?);
        baskets.push(Basket::new(vec![2, 3])?);
    }
    let splits = assign_splits(baskets.len(), SplitFractions::default(), rng)?;
    let provenance = Provenance {
        source: "toy".into(),
        raw_baskets: baskets.len(),
        raw_items: 4,
        ..Provenance::default()
    };
    Corpus::from_parts(catalog, baskets, splits, provenance)
}

/// Maps baskets written in original ids through `catalog`, dropping unknown
/// ids and baskets left with fewer than `min_size` items.
pub fn remap_baskets(baskets: &[Vec<u64>], catalog: &Catalog, min_size: usize) -> Vec<Basket> {
    baskets
        .iter()
        .filter_map(|ids| {
            let items: Vec<usize> = ids.iter().filter_map(|&id| catalog.index_of(id)).collect();
            (items.len() >= min_size.max(1)).then(|| Basket::from_dedup(items).ok()).flatten()
        })
        .collect()
}

impl Corpus {
    /// Baskets of `split` expressed in original ids.
    pub fn split_ids(&self, split: Split) -> Vec<Vec<u64>> {
        self.baskets
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(b, _)| b.items().iter().map(|&i| self.catalog.id_of(i)).collect())
            .collect()
    }

    pub fn source_path(&self) -> PathBuf {
        PathBuf::from(&self.provenance.source)
    }
}
