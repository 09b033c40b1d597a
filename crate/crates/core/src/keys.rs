//! Key encodings: expressions over `k` that are 1 on their own key and 0 on
//! every other valid key of the handler.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Assignment, BinOp, Expr, UnOp};
use crate::rng::Rng as StdRng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("prime size {0} outside 8..=32 bits")]
    InvalidPrimeBits(u32),
    #[error("no suitable primes found after {0} attempts")]
    PrimeGenFailure(usize),
    #[error("point function synthesis gave up after {0} candidates")]
    SynthesisBudgetExhausted(usize),
    #[error("invalid key set: {0}")]
    InvalidKeys(String),
}

/// 3 to 5 pairwise distinct keys, one per merged semantics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySet {
    pub keys: Vec<u64>,
}

impl KeySet {
    pub fn new(keys: Vec<u64>) -> Result<KeySet, KeyError> {
        if !(3..=5).contains(&keys.len()) {
            return Err(KeyError::InvalidKeys(format!(
                "{} keys, expected 3 to 5",
                keys.len()
            )));
        }
        if !distinct(&keys) {
            return Err(KeyError::InvalidKeys("keys are not distinct".into()));
        }
        Ok(KeySet { keys })
    }
}

fn distinct(keys: &[u64]) -> bool {
    keys.iter().enumerate().all(|(i, k)| !keys[..i].contains(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodingKind {
    Factorization,
    PointFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factors {
    pub n: u64,
    pub p: u64,
    pub q: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyEncoding {
    pub kind: EncodingKind,
    pub expr: Expr,
    pub index: usize,
    pub factors: Option<Factors>,
}

impl KeyEncoding {
    pub fn eval(&self, k: u64) -> u64 {
        self.expr.eval(&Assignment {
            k,
            ..Default::default()
        })
    }

    /// 1 on `keys[index]`, 0 on every other key.
    pub fn selects(&self, keys: &[u64]) -> bool {
        keys.iter()
            .enumerate()
            .all(|(j, &k)| self.eval(k) == (j == self.index) as u64)
    }
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for p in BASES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mulm = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powm = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                r = mulm(r, b);
            }
            b = mulm(b, b);
            e >>= 1;
        }
        r
    };
    let (mut d, mut s) = (n - 1, 0);
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in BASES {
        let mut x = powm(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulm(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits.
pub fn random_prime(bits: u32, rng: &mut StdRng) -> Result<u64, KeyError> {
    if !(8..=32).contains(&bits) {
        return Err(KeyError::InvalidPrimeBits(bits));
    }
    let lo = 1u64 << (bits - 1);
    for _ in 0..100_000 {
        let c = rng.gen_range(lo..lo << 1) | 1;
        if is_prime(c) {
            return Ok(c);
        }
    }
    Err(KeyError::PrimeGenFailure(100_000))
}

pub fn factorization_expr(n: u64) -> Expr {
    Expr::divides(Expr::constant(n), Expr::k())
}

/// Co-generate a prime key and its divisibility check. `keys[index]` is
/// overwritten with `p`; other keys that would divide `n` are re-drawn.
pub fn gen_factorization_encoding(
    keys: &mut [u64],
    index: usize,
    prime_bits: u32,
    rng: &mut StdRng,
) -> Result<KeyEncoding, KeyError> {
    for _ in 0..1000 {
        let p = random_prime(prime_bits, rng)?;
        let q = random_prime(prime_bits, rng)?;
        if p == q || keys.iter().enumerate().any(|(j, &k)| j != index && k == p) {
            continue;
        }
        let n = p * q;
        keys[index] = p;
        for j in 0..keys.len() {
            while j != index
                && (keys[j] == p || keys[j] == q || keys[j] <= 1 || keys[j] == n || !distinct(keys))
            {
                keys[j] = rng.gen();
            }
        }
        let enc = KeyEncoding {
            kind: EncodingKind::Factorization,
            expr: factorization_expr(n),
            index,
            factors: Some(Factors { n, p, q }),
        };
        debug_assert!(enc.selects(keys));
        return Ok(enc);
    }
    Err(KeyError::PrimeGenFailure(1000))
}

const CHAIN_OPS: [Option<BinOp>; 10] = [
    Some(BinOp::Add),
    Some(BinOp::Sub),
    Some(BinOp::Mul),
    Some(BinOp::And),
    Some(BinOp::Or),
    Some(BinOp::Xor),
    Some(BinOp::Shl),
    Some(BinOp::Shr),
    None,
    None,
];

/// Multiplicative inverse modulo 2^64 of an odd number.
pub fn inverse_mod_2_64(a: u64) -> Option<u64> {
    if a & 1 == 0 {
        return None;
    }
    let mut x = a;
    for _ in 0..6 {
        x = x.wrapping_mul(2u64.wrapping_sub(a.wrapping_mul(x)));
    }
    Some(x)
}

fn byte(k: u64, i: u8) -> u64 {
    (k >> (8 * i as u32)) & 0xff
}

/// Constant operand for `op` given the chain's current values on each key.
/// The pool mixes uniform constants with values read off the current state
/// (another key's value, its complement, the inverse of the target value).
fn pick_constant(op: BinOp, vals: &[u64], target: usize, rng: &mut StdRng) -> u64 {
    let other = |rng: &mut StdRng| {
        let j = rng.gen_range(0..vals.len() - 1);
        vals[if j >= target { j + 1 } else { j }]
    };
    if rng.gen_bool(0.25) || vals.len() == 1 {
        return match rng.gen_range(0..3) {
            0 => rng.gen(),
            1 => rng.gen_range(0..64),
            _ => 0xff << (8 * rng.gen_range(0..8)),
        };
    }
    let vt = vals[target];
    match op {
        BinOp::Xor | BinOp::Sub => other(rng),
        BinOp::Add => other(rng).wrapping_neg(),
        BinOp::And => !other(rng),
        BinOp::Or => rng.gen(),
        BinOp::Mul => inverse_mod_2_64(vt).unwrap_or_else(|| rng.gen()),
        BinOp::Shr => {
            if rng.gen_bool(0.5) && vt != 0 {
                vt.trailing_zeros() as u64
            } else {
                rng.gen_range(0..64)
            }
        }
        _ => rng.gen_range(0..64),
    }
}

/// Search for a chain of at most `max_ops` operations over key bytes and
/// constants that is 1 on `keys[index]` and 0 on the other keys. Every
/// prefix of a freshly drawn chain counts as one candidate.
pub fn synthesize_point_function(
    keys: &[u64],
    index: usize,
    max_ops: usize,
    cap: usize,
    rng: &mut StdRng,
) -> Result<(KeyEncoding, usize), KeyError> {
    if max_ops == 0 || max_ops > 15 {
        return Err(KeyError::InvalidKeys(format!(
            "max_ops {max_ops} outside 1..=15"
        )));
    }
    if index >= keys.len() || !distinct(keys) {
        return Err(KeyError::InvalidKeys("bad index or duplicate keys".into()));
    }
    let ok = |v: &[u64]| v.iter().enumerate().all(|(j, &x)| x == (j == index) as u64);
    let mut tried = 0usize;
    while tried < cap {
        let b0 = rng.gen_range(0..8u8);
        let mut e = Expr::key_byte(b0);
        let mut vals: Vec<u64> = keys.iter().map(|&k| byte(k, b0)).collect();
        let len = rng.gen_range(1..=max_ops);
        for _ in 0..len {
            let op = CHAIN_OPS[rng.gen_range(0..CHAIN_OPS.len())];
            match op {
                None => {
                    let u = if rng.gen_bool(0.5) {
                        UnOp::Not
                    } else {
                        UnOp::Neg
                    };
                    e = Expr::unary(u, e);
                    vals.iter_mut().for_each(|v| *v = u.apply(*v));
                }
                Some(op) => {
                    let (rhs, rv): (Expr, Vec<u64>) = if rng.gen_bool(1.0 / 3.0) {
                        let b = rng.gen_range(0..8u8);
                        (
                            Expr::key_byte(b),
                            keys.iter().map(|&k| byte(k, b)).collect(),
                        )
                    } else {
                        let c = pick_constant(op, &vals, index, rng);
                        (Expr::constant(c), vec![c; keys.len()])
                    };
                    e = Expr::binary(op, e, rhs);
                    vals.iter_mut()
                        .zip(&rv)
                        .for_each(|(v, r)| *v = op.apply(*v, *r));
                }
            }
            tried += 1;
            if ok(&vals) {
                let enc = KeyEncoding {
                    kind: EncodingKind::PointFunction,
                    expr: e,
                    index,
                    factors: None,
                };
                return Ok((enc, tried));
            }
            if tried >= cap {
                break;
            }
        }
    }
    Err(KeyError::SynthesisBudgetExhausted(cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn trial_division_prime(n: u64) -> bool {
        n >= 2
            && (2..)
                .take_while(|d| d * d <= n)
                .all(|d| !n.is_multiple_of(d))
    }

    #[test]
    fn miller_rabin_agrees_with_trial_division() {
        for n in 0..20_000u64 {
            assert_eq!(is_prime(n), trial_division_prime(n), "{n}");
        }
        assert!(is_prime(40507) && is_prime(39671));
        assert!(is_prime(18446744073709551557));
    }

    #[test]
    fn factorization_example() {
        assert!(trial_division_prime(40507) && trial_division_prime(39671));
        let n = 40507u64 * 39671;
        assert_eq!(n, 1_606_953_197);
        let enc = KeyEncoding {
            kind: EncodingKind::Factorization,
            expr: factorization_expr(n),
            index: 0,
            factors: None,
        };
        assert_eq!(enc.eval(40507), 1);
        assert_eq!(enc.eval(39671), 1);
        assert_eq!(enc.eval(1), 0);
        assert_eq!(enc.eval(n), 0);
        assert_eq!(enc.eval(40508), 0);
    }

    #[test]
    fn generated_factorization_selects() {
        let mut r = rng(5);
        for t in 0..200 {
            let mut keys: Vec<u64> = (0..4).map(|_| r.gen()).collect();
            let enc = gen_factorization_encoding(&mut keys, t % 4, 16, &mut r).unwrap();
            assert!(enc.selects(&keys));
            let f = enc.factors.unwrap();
            assert!(is_prime(f.p) && is_prime(f.q) && f.p != f.q && f.n == f.p * f.q);
            assert_eq!(keys[t % 4], f.p);
            assert!(keys.iter().all(|&k| k != 1));
        }
        assert_eq!(
            gen_factorization_encoding(&mut [1, 2, 3], 0, 40, &mut r),
            Err(KeyError::InvalidPrimeBits(40))
        );
    }

    #[test]
    fn hand_built_point_function_is_valid() {
        let keys = [0x1336u64, 0xabcd, 0x11cd];
        let e = ((Expr::constant(0xff) & Expr::k()) ^ Expr::constant(0xcd))
            * Expr::constant(0x28cb_fbeb_9a02_0a33);
        let enc = KeyEncoding {
            kind: EncodingKind::PointFunction,
            expr: e,
            index: 0,
            factors: None,
        };
        assert!(enc.selects(&keys));
        assert_eq!(enc.eval(0xabcd), 0);
        assert_eq!(inverse_mod_2_64(0xfb), Some(0x28cb_fbeb_9a02_0a33));
    }

    #[test]
    fn single_key_constant_one() {
        let enc = KeyEncoding {
            kind: EncodingKind::PointFunction,
            expr: Expr::constant(1),
            index: 0,
            factors: None,
        };
        assert!(enc.selects(&[0x77]));
        let (e, _) = synthesize_point_function(&[0x77], 0, 15, 1_000_000, &mut rng(1)).unwrap();
        assert!(e.selects(&[0x77]));
    }

    #[test]
    fn synthesized_point_functions_select() {
        let mut r = rng(9);
        for t in 0..100 {
            let keys: Vec<u64> = (0..3 + t % 3).map(|_| r.gen()).collect();
            let (enc, _) =
                synthesize_point_function(&keys, t % keys.len(), 15, 1_000_000, &mut r).unwrap();
            assert!(enc.selects(&keys));
            assert!(enc.expr.vars().iter().all(|v| v == crate::expr::Var::K));
            assert!(enc.expr.op_count() <= 15);
        }
    }

    #[test]
    fn budget_exhaustion() {
        let r = synthesize_point_function(&[1, 2, 3, 4, 5], 0, 1, 10, &mut rng(1));
        assert_eq!(r.unwrap_err(), KeyError::SynthesisBudgetExhausted(10));
    }
}
