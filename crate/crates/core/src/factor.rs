use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DppError, Result};
use crate::rng::DppRng;

/// An observed set: strictly increasing, non-empty item indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Basket(Vec<usize>);

impl Basket {
    /// Builds a basket from items in any order. Duplicates are an error.
    pub fn new(mut items: Vec<usize>) -> Result<Self> {
        if items.is_empty() {
            return Err(DppError::InvalidInput("empty basket".into()));
        }
        items.sort_unstable();
        if items.windows(2).any(|w| w[0] == w[1]) {
            return Err(DppError::InvalidInput(format!("duplicate items in basket {items:?}")));
        }
        Ok(Basket(items))
    }

    /// Builds a basket, silently dropping repeated items.
    pub fn from_dedup(mut items: Vec<usize>) -> Result<Self> {
        items.sort_unstable();
        items.dedup();
        Basket::new(items)
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.0.binary_search(&item).is_ok()
    }

    pub fn check_range(&self, num_items: usize) -> Result<()> {
        check_items(&self.0, num_items)
    }

    /// The basket with `item` removed; `None` if that would leave it empty or
    /// `item` is absent.
    pub fn without(&self, item: usize) -> Option<Basket> {
        let pos = self.0.binary_search(&item).ok()?;
        if self.0.len() == 1 {
            return None;
        }
        let mut items = self.0.clone();
        items.remove(pos);
        Some(Basket(items))
    }

    /// The basket with `item` added. Errors if already present.
    pub fn with(&self, item: usize) -> Result<Basket> {
        match self.0.binary_search(&item) {
            Ok(_) => Err(DppError::InvalidInput(format!("item {item} already in basket"))),
            Err(pos) => {
                let mut items = self.0.clone();
                items.insert(pos, item);
                Ok(Basket(items))
            }
        }
    }
}

impl AsRef<[usize]> for Basket {
    fn as_ref(&self) -> &[usize] {
        &self.0
    }
}

/// Checks that `items` is strictly increasing and below `num_items`.
pub(crate) fn check_items(items: &[usize], num_items: usize) -> Result<()> {
    if items.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DppError::InvalidInput(format!(
            "items must be strictly increasing: {items:?}"
        )));
    }
    match items.last() {
        Some(&last) if last >= num_items => Err(DppError::IndexOutOfRange {
            index: last,
            num_items,
        }),
        _ => Ok(()),
    }
}

/// The `M × K` factor `V` of a low-rank kernel `L = V Vᵀ`. Row `i` is item
/// `i`'s feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactor {
    values: DMatrix<f64>,
}

impl KernelFactor {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (m, k) = values.shape();
        if m == 0 || k == 0 {
            return Err(DppError::InvalidInput(format!("factor shape {m}x{k} is empty")));
        }
        if k > m {
            return Err(DppError::InvalidInput(format!("rank {k} exceeds item count {m}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DppError::InvalidInput("factor has non-finite entries".into()));
        }
        Ok(KernelFactor { values })
    }

    pub fn from_row_slice(num_items: usize, rank: usize, data: &[f64]) -> Result<Self> {
        if data.len() != num_items * rank {
            return Err(DppError::InvalidInput(format!(
                "expected {} values, got {}",
                num_items * rank,
                data.len()
            )));
        }
        KernelFactor::new(DMatrix::from_row_slice(num_items, rank, data))
    }

    /// I.i.d. uniform `[0, 1)` entries scaled by `1/√K`.
    pub fn random(num_items: usize, rank: usize, rng: &mut DppRng) -> Result<Self> {
        let scale = 1.0 / (rank as f64).sqrt();
        let values = DMatrix::from_fn(num_items, rank, |_, _| rng.random::<f64>() * scale);
        KernelFactor::new(values)
    }

    pub fn num_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn rank(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        let (m, k) = self.values.shape();
        let mut out = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                out.push(self.values[(i, j)]);
            }
        }
        out
    }

    /// `V_A`: the rows indexed by `items`, stacked.
    pub fn rows(&self, items: &[usize]) -> DMatrix<f64> {
        self.values.select_rows(items)
    }

    /// Dense `L = V Vᵀ`. Only sensible for small catalogs.
    pub fn full_kernel(&self) -> DMatrix<f64> {
        &self.values * self.values.transpose()
    }
}
