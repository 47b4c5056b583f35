use super::{pow, AbcTriple, OptimizerFamily, ParamRole, ScaleExpr, Scheme};

fn fi(num: i64, den: i64) -> ScaleExpr {
    ScaleExpr::fan_in(pow(num, den))
}

fn fo(num: i64, den: i64) -> ScaleExpr {
    ScaleExpr::fan_out(pow(num, den))
}

fn one() -> ScaleExpr {
    ScaleExpr::one()
}

fn triple(mult: ScaleExpr, init_var: ScaleExpr, lr: ScaleExpr) -> AbcTriple {
    AbcTriple { mult, init_var, lr }
}

/// The table cell for `role` under `scheme`. Scalar-like parameters are
/// width-independent under every scheme.
pub fn scheme_lookup(role: ParamRole, scheme: Scheme, optimizer: OptimizerFamily) -> AbcTriple {
    use OptimizerFamily::{Adam, Sgd};
    use ParamRole::*;

    if role == ScalarLike {
        return triple(one(), one(), one());
    }
    // Input weights and biases share a column everywhere.
    let role = if role == Bias { InputWeight } else { role };

    match scheme {
        Scheme::Sp => triple(one(), fi(-1, 1), one()),
        Scheme::Ntp => match (role, optimizer) {
            (InputWeight, _) => triple(one(), fi(-1, 1), one()),
            (_, Sgd) => triple(fi(-1, 2), one(), one()),
            (HiddenWeight, Adam) => triple(fi(-1, 2), one(), fi(-1, 2)),
            (_, Adam) => triple(fi(-1, 2), one(), one()),
        },
        Scheme::MupT3 => match (role, optimizer) {
            (InputWeight, Sgd) => triple(one(), fi(-1, 1), fo(1, 1)),
            (InputWeight, Adam) => triple(one(), fi(-1, 1), one()),
            (OutputWeight, Sgd) => triple(one(), fi(-2, 1), fi(-1, 1)),
            (OutputWeight, Adam) => triple(one(), fi(-2, 1), fi(-1, 1)),
            (_, Sgd) => triple(one(), fi(-1, 1), one()),
            (_, Adam) => triple(one(), fi(-1, 1), fi(-1, 1)),
        },
        Scheme::MupT8 => match (role, optimizer) {
            (OutputWeight, Sgd) => triple(fi(-1, 1), one(), fi(1, 1)),
            (OutputWeight, Adam) => triple(fi(-1, 1), one(), one()),
            _ => scheme_lookup(role, Scheme::MupT3, optimizer),
        },
        Scheme::MupT9 => match (role, optimizer) {
            (InputWeight, Sgd) => triple(fo(1, 2), fo(-1, 1), one()),
            (InputWeight, Adam) => triple(fo(1, 2), fo(-1, 1), fo(-1, 2)),
            (OutputWeight, Sgd) => triple(fi(-1, 2), fi(-1, 1), one()),
            (OutputWeight, Adam) => triple(fi(-1, 2), fi(-1, 1), fi(-1, 2)),
            _ => scheme_lookup(role, Scheme::MupT3, optimizer),
        },
    }
}

/// `theta` with `rescale_theta(lookup(from), theta) == lookup(to)` after
/// projection onto the role's infinite dims. Only defined between the three
/// muP tables.
pub fn equivalence_theta(role: ParamRole, from: Scheme, to: Scheme) -> Option<ScaleExpr> {
    fn from_t3(role: ParamRole, to: Scheme) -> Option<ScaleExpr> {
        use ParamRole::*;
        if !to.is_mup() {
            return None;
        }
        Some(match (to, role) {
            (Scheme::MupT3, _) | (_, HiddenWeight) | (_, ScalarLike) => one(),
            (Scheme::MupT8, OutputWeight) => fi(-1, 1),
            (Scheme::MupT8, _) => one(),
            (Scheme::MupT9, OutputWeight) => fi(-1, 2),
            (Scheme::MupT9, _) => fo(1, 2),
            _ => return None,
        })
    }
    let a = from_t3(role, from)?;
    let b = from_t3(role, to)?;
    Some(b.div(&a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parametrize::{Dim, InfShape};

    fn rat(n: i64, d: i64) -> crate::parametrize::Power {
        pow(n, d)
    }

    #[test]
    fn hidden_t3_adam() {
        let t = scheme_lookup(
            ParamRole::HiddenWeight,
            Scheme::MupT3,
            OptimizerFamily::Adam,
        );
        assert_eq!(t.mult, one());
        assert_eq!(t.init_var.fan_in_pow, rat(-1, 1));
        assert_eq!(t.lr.fan_in_pow, rat(-1, 1));
        assert_eq!(t.lr.fan_out_pow, rat(0, 1));
    }

    #[test]
    fn output_t3_sgd() {
        let t = scheme_lookup(ParamRole::OutputWeight, Scheme::MupT3, OptimizerFamily::Sgd);
        assert_eq!(t.mult, one());
        assert_eq!(t.init_var, fi(-2, 1));
        assert_eq!(t.lr, fi(-1, 1));
    }

    #[test]
    fn input_t3_sgd() {
        let t = scheme_lookup(ParamRole::InputWeight, Scheme::MupT3, OptimizerFamily::Sgd);
        assert_eq!(t.mult, one());
        assert_eq!(t.init_var, fi(-1, 1));
        assert_eq!(t.lr, fo(1, 1));
    }

    #[test]
    fn output_t8_adam() {
        let t = scheme_lookup(
            ParamRole::OutputWeight,
            Scheme::MupT8,
            OptimizerFamily::Adam,
        );
        assert_eq!(t.mult, fi(-1, 1));
        assert_eq!(t.init_var, one());
        assert_eq!(t.lr, one());
    }

    #[test]
    fn sp_is_the_plain_baseline() {
        for role in [
            ParamRole::InputWeight,
            ParamRole::HiddenWeight,
            ParamRole::OutputWeight,
            ParamRole::Bias,
        ] {
            for opt in [OptimizerFamily::Sgd, OptimizerFamily::Adam] {
                let t = scheme_lookup(role, Scheme::Sp, opt);
                assert_eq!(t.mult, one());
                assert_eq!(t.init_var, fi(-1, 1));
                assert_eq!(t.lr, one());
            }
        }
    }

    #[test]
    fn scalar_like_is_constant_everywhere() {
        for scheme in Scheme::ALL {
            for opt in [OptimizerFamily::Sgd, OptimizerFamily::Adam] {
                let t = scheme_lookup(ParamRole::ScalarLike, scheme, opt);
                assert!(t.mult.is_width_independent());
                assert!(t.init_var.is_width_independent());
                assert!(t.lr.is_width_independent());
            }
        }
    }

    #[test]
    fn t3_output_to_t8_with_inverse_fan_in() {
        let t3 = scheme_lookup(
            ParamRole::OutputWeight,
            Scheme::MupT3,
            OptimizerFamily::Adam,
        );
        let r = t3.rescale_theta(&fi(-1, 1), OptimizerFamily::Adam).unwrap();
        assert_eq!(r.mult, fi(-1, 1));
        assert_eq!(r.init_var, one());
        assert_eq!(r.lr, one());
    }

    #[test]
    fn t3_output_to_t9_with_inverse_sqrt_fan_in() {
        let t3 = scheme_lookup(ParamRole::OutputWeight, Scheme::MupT3, OptimizerFamily::Sgd);
        let r = t3.rescale_theta(&fi(-1, 2), OptimizerFamily::Sgd).unwrap();
        assert_eq!(r.mult, fi(-1, 2));
        assert_eq!(r.init_var, fi(-1, 1));
        assert_eq!(r.lr, one());
    }

    #[test]
    fn mup_tables_are_pairwise_equivalent() {
        let mups = [Scheme::MupT3, Scheme::MupT8, Scheme::MupT9];
        for role in ParamRole::ALL {
            for opt in [OptimizerFamily::Sgd, OptimizerFamily::Adam] {
                for from in mups {
                    for to in mups {
                        let theta = equivalence_theta(role, from, to).unwrap();
                        let got = scheme_lookup(role, from, opt)
                            .rescale_theta(&theta, opt)
                            .unwrap();
                        let want = scheme_lookup(role, to, opt);
                        assert_eq!(
                            got.project(role),
                            want.project(role),
                            "{role:?} {from} -> {to} {opt:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn equivalence_undefined_outside_mup() {
        assert!(equivalence_theta(ParamRole::HiddenWeight, Scheme::Sp, Scheme::MupT3).is_none());
        assert!(equivalence_theta(ParamRole::HiddenWeight, Scheme::MupT3, Scheme::Ntp).is_none());
    }

    #[test]
    fn base_shape_reduces_to_constants() {
        let w = Dim::width(64, 64);
        let f = Dim::finite(10);
        let shapes = [
            InfShape::matrix(w, f),
            InfShape::matrix(f, w),
            InfShape::matrix(w, w),
            InfShape::vector(w),
            InfShape::scalar(),
        ];
        for shape in &shapes {
            for scheme in Scheme::ALL {
                for opt in [OptimizerFamily::Sgd, OptimizerFamily::Adam] {
                    let t = scheme_lookup(shape.role(), scheme, opt);
                    assert_eq!(t.effective_lr(shape, 0.3), 0.3);
                    assert_eq!(t.effective_init_var(shape, 0.7), 0.7);
                    assert_eq!(t.effective_multiplier(shape, 2.0), 2.0);
                }
            }
        }
    }

    #[test]
    fn hidden_adam_lr_at_four_times_base() {
        let shape = InfShape::matrix(Dim::width(512, 128), Dim::width(512, 128));
        let t = scheme_lookup(shape.role(), Scheme::MupT3, OptimizerFamily::Adam);
        assert_eq!(t.effective_lr(&shape, 1e-3), 1e-3 / 4.0);
    }

    #[test]
    fn mlp_sgd_learning_rates_and_output_variance() {
        // width n = 4 n0 with n0 = 64, d_in = 10
        let (n, n0, d) = (256, 64, 10);
        let ratio = (n / n0) as f64;
        let w1 = InfShape::matrix(Dim::width(n, n0), Dim::finite(d));
        let w3 = InfShape::matrix(Dim::finite(1), Dim::width(n, n0));
        let t1 = scheme_lookup(w1.role(), Scheme::MupT3, OptimizerFamily::Sgd);
        let t3 = scheme_lookup(w3.role(), Scheme::MupT3, OptimizerFamily::Sgd);
        assert_eq!(t1.effective_lr(&w1, 0.1), 0.1 * ratio);
        assert_eq!(t3.effective_lr(&w3, 0.1), 0.1 / ratio);
        // master variance 1/n0 at the base fan_in
        let v = t3.effective_init_var(&w3, 1.0 / n0 as f64);
        assert!((v - 1.0 / (n as f64 * ratio)).abs() < 1e-18);
    }
}
