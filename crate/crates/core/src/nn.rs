//! Registration helpers and parameter-count tables shared by the layers.

use std::fmt;

use crate::autograd::{ParamId, ParamRole, ParamStore};
use crate::error::Result;
use crate::tensor::{Float, Shape, Tensor};

pub fn pointwise<T: Float>(store: &mut ParamStore<T>, name: String, c_in: usize, c_out: usize) -> Result<ParamId> {
    store.add(name, Tensor::zeros(Shape::new(1, 1, c_in, c_out)), ParamRole::Weight)
}

pub fn depthwise<T: Float>(store: &mut ParamStore<T>, name: String, c: usize) -> Result<ParamId> {
    store.add(name, Tensor::zeros(Shape::new(1, 3, 3, c)), ParamRole::Weight)
}

pub fn bias<T: Float>(store: &mut ParamStore<T>, name: String, c: usize) -> Result<ParamId> {
    store.add(name, Tensor::zeros(Shape::new(1, 1, 1, c)), ParamRole::Bias)
}

/// One line of a per-layer parameter table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub layer: String,
    pub op: &'static str,
    pub params: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamBreakdown {
    pub title: String,
    pub rows: Vec<ParamRow>,
}

impl ParamBreakdown {
    pub fn new(title: impl Into<String>) -> Self {
        ParamBreakdown {
            title: title.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: impl Into<String>, op: &'static str, params: usize, out_dim: usize) {
        self.rows.push(ParamRow {
            layer: layer.into(),
            op,
            params,
            out_dim,
        });
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// First row whose layer name matches exactly.
    pub fn row(&self, layer: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    pub fn extend(&mut self, other: ParamBreakdown) {
        self.rows.extend(other.rows);
    }
}

/// `1234567` -> `"1,234,567"`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        writeln!(f, "{:<28} {:<18} {:>12} {:>8}", "layer", "operation", "params", "out")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:<18} {:>12} {:>8}",
                r.layer,
                r.op,
                thousands(r.params),
                r.out_dim
            )?;
        }
        write!(f, "{:<28} {:<18} {:>12}", "total", "", thousands(self.total()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separator() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(123), "123");
        assert_eq!(thousands(1_321), "1,321");
        assert_eq!(thousands(1_410_615), "1,410,615");
    }
}
