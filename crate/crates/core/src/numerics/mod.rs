//! Dense f64 tensors, a reverse-mode tape and the Adam update.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::ParamStore;
pub use tape::{log_softmax, softmax, Gradients, Tape, Var};
pub use tensor::{nearest_row, squared_distance, Tensor};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::check_params;
    use super::*;
    use crate::error::Error;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn store(entries: &[(&str, &[usize])]) -> ParamStore {
        let mut r = rng();
        let mut s = ParamStore::new();
        for (name, shape) in entries {
            s.insert(*name, Tensor::uniform(shape, 1.0, &mut r));
        }
        s
    }

    fn assert_grads_ok(s: &ParamStore, names: &[&str], f: impl Fn(&mut Tape, &ParamStore) -> crate::Result<Var>) {
        for c in check_params(s, names, 64, f).unwrap() {
            assert!(c.rel_err < 1e-4, "{}: rel err {}", c.name, c.rel_err);
            assert!(c.analytic_norm > 0.0, "{}: zero gradient", c.name);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng();
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.var(a.clone()), tape.var(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((tape.value(c).data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_gradients() {
        let s = store(&[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[5, 2])]);
        assert_grads_ok(&s, &["a", "b", "c"], |t, s| {
            let (a, b, c) = (t.param(s, "a")?, t.param(s, "b")?, t.param(s, "c")?);
            let ab = t.matmul(a, b)?;
            let abc = t.matmul_nt(ab, c)?;
            Ok(t.sum_sq(abc))
        });
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.0, 2f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);

        let c = tape.var(Tensor::full(&[2, 4], 3.5));
        let u = tape.softmax(c).unwrap();
        assert!(tape.value(u).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance_and_non_finite_input() {
        let base = vec![0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 7.25).collect();
        let mut tape = Tape::new();
        let a = tape.var(Tensor::vector(base));
        let b = tape.var(Tensor::vector(shifted));
        let (sa, sb) = (tape.softmax(a).unwrap(), tape.softmax(b).unwrap());
        for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((p - q).abs() < 1e-15);
        }
        let bad = tape.var(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(tape.softmax(bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_softmax_gradient_and_values() {
        let s = store(&[("x", &[3, 4]), ("w", &[3, 4])]);
        assert_grads_ok(&s, &["x"], |t, s| {
            let (x, w) = (t.param(s, "x")?, t.param(s, "w")?);
            let l = t.log_softmax(x)?;
            let m = t.mul(l, w)?;
            Ok(t.sum(m))
        });
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.0, 2f64.ln()]));
        let l = tape.log_softmax(x).unwrap();
        assert!((tape.value(l).data()[0] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let mask = [true, false, false, true, true, true];
        let y = tape.softmax_masked(x, Some(&mask)).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..3], &[1.0, 0.0, 0.0]);
        assert!((d[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_and_elementwise_gradients() {
        let s = store(&[("x", &[3, 5]), ("w", &[3, 5]), ("r", &[5])]);
        assert_grads_ok(&s, &["x", "w", "r"], |t, s| {
            let (x, w, r) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "r")?);
            let h = t.add_row(x, r)?;
            let g = t.gelu(h);
            let p = t.softmax(g)?;
            let q = t.mul(p, w)?;
            let d = t.sub(q, x)?;
            let e = t.scale(d, 0.5);
            Ok(t.sum_sq(e))
        });
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::full(&[1, 4], 2.0));
        let g = tape.var(Tensor::full(&[4], 1.0));
        let b = tape.var(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.var(Tensor::vector(vec![1.0, -1.0]));
        let g = tape.var(Tensor::full(&[2], 1.0));
        let b = tape.var(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradients() {
        let s = store(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6]), ("w", &[3, 6])]);
        assert_grads_ok(&s, &["x", "g", "b"], |t, s| {
            let (x, g, b, w) = (t.param(s, "x")?, t.param(s, "g")?, t.param(s, "b")?, t.param(s, "w")?);
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let z = t.mul(y, w)?;
            let z = t.gelu(z);
            Ok(t.sum(z))
        });
    }

    #[test]
    fn cross_entropy_closed_forms_and_errors() {
        let mut tape = Tape::new();
        let uniform = tape.var(Tensor::zeros(&[3, 7]));
        let l = tape.cross_entropy(uniform, &[1, 2, 6], &[true, true, false]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let mut peaked = Tensor::full(&[2, 4], -60.0);
        peaked.data_mut()[1] = 60.0;
        peaked.data_mut()[4 + 3] = 60.0;
        let p = tape.var(peaked);
        let l = tape.cross_entropy(p, &[1, 3], &[true, true]).unwrap();
        assert!(tape.value(l).item() < 1e-12);

        assert!(matches!(tape.cross_entropy(uniform, &[0, 0, 0], &[false; 3]), Err(Error::DegenerateBatch(_))));
        assert!(tape.cross_entropy(uniform, &[0, 9, 0], &[true; 3]).is_err());
    }

    #[test]
    fn cross_entropy_gradients() {
        let s = store(&[("h", &[4, 3]), ("e", &[6, 3])]);
        assert_grads_ok(&s, &["h", "e"], |t, s| {
            let (h, e) = (t.param(s, "h")?, t.param(s, "e")?);
            let logits = t.matmul_nt(h, e)?;
            t.cross_entropy(logits, &[0, 5, 2, 3], &[true, true, false, true])
        });
    }

    #[test]
    fn gather_slice_concat_gradients() {
        let s = store(&[("tab", &[5, 4]), ("w", &[4, 4])]);
        assert_grads_ok(&s, &["tab", "w"], |t, s| {
            let (tab, w) = (t.param(s, "tab")?, t.param(s, "w")?);
            let rows = t.gather_rows(tab, &[3, 1, 3])?;
            let a = t.slice_cols(rows, 0, 2)?;
            let b = t.slice_cols(rows, 2, 2)?;
            let c = t.concat_cols(&[b, a])?;
            let d = t.matmul(c, w)?;
            let e = t.slice_rows(d, 1, 2)?;
            let e = t.gelu(e);
            Ok(t.sum_sq(e))
        });
    }

    #[test]
    fn ln_gradient_and_domain() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![0.2, 0.5, 1.7]));
        assert_grads_ok(&s, &["p"], |t, s| {
            let p = t.param(s, "p")?;
            let l = t.ln(p)?;
            Ok(t.sum_sq(l))
        });
        let mut tape = Tape::new();
        let z = tape.var(Tensor::vector(vec![0.0]));
        assert!(tape.ln(z).is_err());
    }

    #[test]
    fn stop_gradient_identities_are_exact() {
        let mut r = rng();
        let h0 = Tensor::uniform(&[1, 6], 1.0, &mut r);
        let z0 = Tensor::uniform(&[1, 6], 1.0, &mut r);

        let mut tape = Tape::new();
        let h = tape.var(h0.clone());
        let z = tape.var(z0.clone());
        let sg_h = tape.stop_gradient(h);
        assert_eq!(tape.value(sg_h), &h0);
        let d = tape.sub(sg_h, z).unwrap();
        let loss = tape.sum_sq(d);
        let g = tape.backward(loss).unwrap();
        assert!(g.get_or_zero(&tape, h).iter().all(|&v| v == 0.0));
        assert!(g.get_or_zero(&tape, z).iter().any(|&v| v != 0.0));

        let mut tape = Tape::new();
        let h = tape.var(h0);
        let z = tape.var(z0);
        let sg_z = tape.stop_gradient(z);
        let d = tape.sub(h, sg_z).unwrap();
        let loss = tape.sum_sq(d);
        let g = tape.backward(loss).unwrap();
        assert!(g.get_or_zero(&tape, z).iter().all(|&v| v == 0.0));
        assert!(g.get_or_zero(&tape, h).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_prefix_gets_no_gradient() {
        let s = store(&[("enc.w", &[2, 2]), ("dec.w", &[2, 2])]);
        let mut tape = Tape::new();
        tape.freeze_prefix("enc.");
        let a = tape.param(&s, "enc.w").unwrap();
        let b = tape.param(&s, "dec.w").unwrap();
        let c = tape.matmul(a, b).unwrap();
        let l = tape.sum_sq(c);
        let g = tape.backward(l).unwrap();
        assert!(!g.params().contains_key("enc.w"));
        assert!(g.params().contains_key("dec.w"));
    }

    #[test]
    fn replay_is_deterministic() {
        let s = store(&[("a", &[4, 4]), ("b", &[4, 4])]);
        let run = || {
            let mut t = Tape::new();
            let (a, b) = (t.param(&s, "a").unwrap(), t.param(&s, "b").unwrap());
            let c = t.matmul(a, b).unwrap();
            let d = t.softmax(c).unwrap();
            let l = t.sum_sq(d);
            let g = t.backward(l).unwrap();
            (t.value(l).item().to_bits(), g.into_params())
        };
        assert_eq!(run(), run());
    }
}
