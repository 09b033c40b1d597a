//! Diversity of simplified MBAs across a corpus.

use std::collections::HashSet;

use crate::expr::{normalize, Expr};

#[derive(Debug, Clone, PartialEq)]
pub struct Diversity {
    pub total: usize,
    pub unique: usize,
    pub unique_fraction: f64,
    /// Unique forms also present in the other corpus.
    pub shared: Option<usize>,
    /// `shared / unique`.
    pub overlap_fraction: Option<f64>,
}

fn forms(corpus: &[Expr]) -> HashSet<u128> {
    corpus.iter().map(|e| normalize(e).digest()).collect()
}

pub fn mba_diversity(corpus: &[Expr], other: Option<&[Expr]>) -> Diversity {
    let a = forms(corpus);
    let shared = other.map(|o| forms(o).intersection(&a).count());
    Diversity {
        total: corpus.len(),
        unique: a.len(),
        unique_fraction: a.len() as f64 / corpus.len().max(1) as f64,
        shared,
        overlap_fraction: shared.map(|s| s as f64 / a.len().max(1) as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    #[test]
    fn duplicates_and_self_overlap() {
        let c: Vec<Expr> = ["(add x y)", "(add y x)", "(xor x y)"]
            .iter()
            .map(|s| parse_expr(s).unwrap())
            .collect();
        let d = mba_diversity(&c, Some(&c));
        assert_eq!(d.unique, 2);
        assert_eq!(d.overlap_fraction, Some(1.0));
    }
}
