//! Layered parameter containers.
//!
//! A model's parameters are an ordered list of named blocks, one block per
//! parameter tensor. Values live in one contiguous buffer; the block layout
//! is shared between every container derived from the same model so that
//! congruence checks are usually a pointer comparison.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    names: Vec<String>,
    /// `offsets[l]..offsets[l + 1]` is block `l`; length is `h + 1`.
    offsets: Vec<usize>,
}

impl Layout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut names = Vec::new();
        let mut offsets = vec![0];
        for (name, len) in blocks {
            let name = name.into();
            if len == 0 {
                return Err(Error::Validation(format!("block `{name}` is empty")));
            }
            offsets.push(offsets.last().unwrap() + len);
            names.push(name);
        }
        if names.is_empty() {
            return Err(Error::Validation("parameter set has no blocks".into()));
        }
        Ok(Layout { names, offsets })
    }

    /// Number of blocks (`h`).
    pub fn num_blocks(&self) -> usize {
        self.names.len()
    }

    /// Total dimension (`p`).
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn name(&self, block: usize) -> &str {
        &self.names[block]
    }

    pub fn range(&self, block: usize) -> std::ops::Range<usize> {
        self.offsets[block]..self.offsets[block + 1]
    }

    pub fn block_len(&self, block: usize) -> usize {
        self.offsets[block + 1] - self.offsets[block]
    }
}

/// Model parameters, or any statistic with the same block structure
/// (gradients, moments, ratios).
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredParams {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

/// Optimizer statistics share the parameter container.
pub type FlatStat = LayeredParams;

impl LayeredParams {
    pub fn from_blocks<S: Into<String>>(blocks: Vec<(S, Vec<f64>)>) -> Result<Self> {
        let mut lens = Vec::with_capacity(blocks.len());
        let mut values = Vec::new();
        for (name, vals) in blocks {
            lens.push((name.into(), vals.len()));
            values.extend(vals);
        }
        let layout = Arc::new(Layout::new(lens)?);
        Ok(LayeredParams { layout, values })
    }

    pub fn from_layout(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Congruence(format!(
                "{} values for a layout of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(LayeredParams { layout, values })
    }

    pub fn filled(layout: Arc<Layout>, value: f64) -> Self {
        let values = vec![value; layout.dim()];
        LayeredParams { layout, values }
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self::filled(layout, 0.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn filled_like(&self, value: f64) -> Self {
        Self::filled(self.layout.clone(), value)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.num_blocks()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, block: usize) -> &[f64] {
        &self.values[self.layout.range(block)]
    }

    pub fn block_mut(&mut self, block: usize) -> &mut [f64] {
        let range = self.layout.range(block);
        &mut self.values[range]
    }

    /// `(name, values)` for every block in order.
    pub fn blocks(&self) -> impl Iterator<Item = (&str, &[f64])> {
        (0..self.num_blocks()).map(move |l| (self.layout.name(l), self.block(l)))
    }

    pub fn is_congruent(&self, other: &LayeredParams) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_congruent(&self, other: &LayeredParams) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Congruence(format!(
                "layouts differ (h={}, p={} vs h={}, p={})",
                self.num_blocks(),
                self.dim(),
                other.num_blocks(),
                other.dim()
            )))
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &LayeredParams) -> Result<()> {
        self.check_congruent(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|x| *x *= a);
    }

    /// Coordinatewise `self = max(self, other)`.
    pub fn max_assign(&mut self, other: &LayeredParams) -> Result<()> {
        self.check_congruent(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x = x.max(*y);
        }
        Ok(())
    }

    fn zip_with(&self, other: &LayeredParams, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_congruent(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(LayeredParams {
            layout: self.layout.clone(),
            values,
        })
    }
}

/// Euclidean norm of every block.
pub fn block_norms(x: &LayeredParams) -> Vec<f64> {
    (0..x.num_blocks())
        .map(|l| x.block(l).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Coordinatewise maximum.
pub fn ew_max(a: &FlatStat, b: &FlatStat) -> Result<FlatStat> {
    a.zip_with(b, f64::max)
}

/// Coordinatewise `m / sqrt(max(v, floor))`.
///
/// The floor sits inside the square root, so a second moment that is already
/// at least `floor` is used unchanged.
pub fn ratio_div(m: &FlatStat, v: &FlatStat, floor: f64) -> Result<FlatStat> {
    debug_assert!(floor > 0.0);
    m.zip_with(v, |m, v| m / v.max(floor).sqrt())
}

/// `a * x + b * y`.
pub fn lin_comb(a: f64, x: &LayeredParams, b: f64, y: &LayeredParams) -> Result<LayeredParams> {
    x.zip_with(y, |x, y| a * x + b * y)
}
