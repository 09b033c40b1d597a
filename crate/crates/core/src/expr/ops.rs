//! Operator overloads so expressions can be written in Rust syntax.
//! `<<` and `>>` build `shl`/`shr` nodes.

use super::{BinOp, Expr, UnOp};

macro_rules! bin_impl {
    ($tr:ident, $method:ident, $op:expr) => {
        impl std::ops::$tr for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::binary($op, self, rhs)
            }
        }
        impl std::ops::$tr<&Expr> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::binary($op, self.clone(), rhs.clone())
            }
        }
        impl std::ops::$tr<u64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: u64) -> Expr {
                Expr::binary($op, self, Expr::constant(rhs))
            }
        }
    };
}

bin_impl!(Add, add, BinOp::Add);
bin_impl!(Sub, sub, BinOp::Sub);
bin_impl!(Mul, mul, BinOp::Mul);
bin_impl!(BitAnd, bitand, BinOp::And);
bin_impl!(BitOr, bitor, BinOp::Or);
bin_impl!(BitXor, bitxor, BinOp::Xor);
bin_impl!(Shl, shl, BinOp::Shl);
bin_impl!(Shr, shr, BinOp::Shr);

impl std::ops::Not for Expr {
    type Output = Expr;
    fn not(self) -> Expr {
        Expr::unary(UnOp::Not, self)
    }
}
impl std::ops::Not for &Expr {
    type Output = Expr;
    fn not(self) -> Expr {
        Expr::unary(UnOp::Not, self.clone())
    }
}
impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnOp::Neg, self)
    }
}
impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::unary(UnOp::Neg, self.clone())
    }
}
