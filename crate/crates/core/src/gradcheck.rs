//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Model;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, per unit of loss magnitude,
/// so coordinates whose true gradient is ~0 are judged on absolute error.
/// Central differences carry roundoff of order `|L| * ulp / eps`, which is
/// why the floor scales with `max(1, |L|)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tolerance: f64,
    /// Upper bound on probed coordinates per parameter; larger tensors are
    /// sampled with a fixed stride.
    pub max_coords_per_param: usize,
    /// Multiplies the analytic gradient before comparison. Only used to
    /// demonstrate that a wrong gradient is caught.
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            max_coords_per_param: 64,
            corrupt_analytic: None,
        }
    }
}

impl GradCheck {
    /// Compares the analytic gradient of `f` against central differences
    /// for every trainable parameter in `store`.
    pub fn run<F>(&self, name: &str, store: &mut ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    {
        store.zero_grad();
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss, store)?;
        let floor = REL_FLOOR * g.scalar(loss).abs().max(1.0);

        let mut report = GradCheckReport {
            name: name.to_string(),
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
            tolerance: self.tolerance,
        };
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (pname, len, trainable) = {
                let p = store.get(id);
                (p.name.clone(), p.value.len(), p.trainable)
            };
            if !trainable {
                continue;
            }
            let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; len]);
            let stride = len.div_ceil(self.max_coords_per_param).max(1);
            for j in (0..len).step_by(stride) {
                let orig = store.get(id).value.data()[j];
                store.get_mut(id).value.data_mut()[j] = orig + self.eps;
                let plus = eval(store, &f)?;
                store.get_mut(id).value.data_mut()[j] = orig - self.eps;
                let minus = eval(store, &f)?;
                store.get_mut(id).value.data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[j] * self.corrupt_analytic.unwrap_or(1.0);
                let err = relative_error(a, numeric, floor);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    if err >= report.max_rel_error {
                        report.worst = Some((pname.clone(), j));
                    }
                }
            }
        }
        store.zero_grad();
        Ok(report)
    }

    /// [`GradCheck::run`] for a loss that reads parameters through a model.
    pub fn run_model<F>(&self, name: &str, model: &mut Model, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Model, &mut Graph) -> Result<Var>,
    {
        let mut store = std::mem::take(&mut model.store);
        let shell = model.clone();
        let report = self.run(name, &mut store, |g, s| {
            let mut m = shell.clone();
            m.store = s.clone();
            f(&m, g)
        });
        model.store = store;
        report
    }
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.scalar(loss))
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Every differentiable graph op with the input shapes it is checked on.
pub const OPS: &[(&str, &[&[usize]], OpFn)] = &[
    ("matmul", &[&[2, 3], &[3, 4]], |g, x| g.matmul(x[0], x[1])),
    ("matmul_t", &[&[2, 3], &[4, 3]], |g, x| g.matmul_t(x[0], x[1])),
    ("transpose", &[&[3, 2]], |g, x| g.transpose(x[0])),
    ("add", &[&[2, 3], &[2, 3]], |g, x| g.add(x[0], x[1])),
    ("sub", &[&[2, 3], &[2, 3]], |g, x| g.sub(x[0], x[1])),
    ("mul", &[&[2, 3], &[2, 3]], |g, x| g.mul(x[0], x[1])),
    ("add_bias", &[&[3, 4], &[4]], |g, x| g.add_bias(x[0], x[1])),
    ("scale", &[&[5]], |g, x| Ok(g.scale(x[0], -1.7))),
    ("relu", &[&[3, 4]], |g, x| Ok(g.relu(x[0]))),
    ("softmax axis 0", &[&[3, 4]], |g, x| g.softmax(x[0], 0)),
    ("softmax axis 1", &[&[2, 3, 4]], |g, x| g.softmax(x[0], 1)),
    ("causal_softmax", &[&[3, 5]], |g, x| g.causal_softmax(x[0])),
    ("layer_norm", &[&[3, 4], &[4], &[4]], |g, x| {
        g.layer_norm(x[0], x[1], x[2])
    }),
    ("embedding", &[&[4, 3]], |g, x| g.embedding(x[0], &[2, 0, 2, 3])),
    ("concat_cols", &[&[2, 3], &[2, 2]], |g, x| g.concat_cols(&[x[0], x[1]])),
    ("concat_rows", &[&[2, 3], &[1, 3]], |g, x| g.concat_rows(&[x[0], x[1]])),
    ("slice_cols", &[&[2, 5]], |g, x| g.slice_cols(x[0], 1, 4)),
    ("slice_rows", &[&[5, 2]], |g, x| g.slice_rows(x[0], 1, 3)),
    ("repeat_rows", &[&[3]], |g, x| g.repeat_rows(x[0], 3)),
    ("mean_rows", &[&[4, 3]], |g, x| g.mean_rows(x[0])),
    ("sum", &[&[2, 3]], |g, x| Ok(g.sum(x[0]))),
    ("reshape", &[&[2, 3]], |g, x| g.reshape(x[0], &[3, 2])),
    ("cross_entropy", &[&[4, 5]], |g, x| {
        g.cross_entropy(x[0], &[1, 0, 4, 2], 0)
    }),
    ("cosine", &[&[6], &[6]], |g, x| g.cosine(x[0], x[1])),
];

/// Tensor of U[-1, 1] draws.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Checks every entry of [`OPS`] on inputs drawn from U[-1, 1]. Outputs
/// are contracted with fixed random weights to give a scalar.
pub fn op_suite(check: &GradCheck, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&(name, shapes, op)| {
            let mut store = ParamStore::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(format!("x{i}"), uniform(&mut rng, s)))
                .collect();
            let out_shape = {
                let mut g = Graph::new();
                let xs: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
                let out = op(&mut g, &xs)?;
                g.value(out).shape().to_vec()
            };
            let weights = uniform(&mut rng, &out_shape);
            check.run(name, &mut store, |g, s| {
                let xs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                let out = op(g, &xs)?;
                let w = g.constant(weights.clone());
                let prod = g.mul(out, w)?;
                Ok(g.sum(prod))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(store: &mut ParamStore) -> impl Fn(&mut Graph, &ParamStore) -> Result<Var> {
        let id = store.add("x", Tensor::vector(vec![0.3, -1.2, 2.0]));
        move |g, s| {
            let x = g.param(s, id);
            let sq = g.mul(x, x)?;
            let cube = g.mul(sq, x)?;
            Ok(g.sum(cube))
        }
    }

    #[test]
    fn correct_gradient_passes() {
        let mut store = ParamStore::new();
        let f = quadratic(&mut store);
        let r = GradCheck::default().run("cube", &mut store, f).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut store = ParamStore::new();
        let f = quadratic(&mut store);
        let check = GradCheck {
            corrupt_analytic: Some(1.01),
            ..Default::default()
        };
        let r = check.run("cube", &mut store, f).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_error > 5e-3);
    }

    #[test]
    fn every_op_passes() {
        let reports = op_suite(&GradCheck::default(), 11).unwrap();
        assert_eq!(reports.len(), OPS.len());
        for r in reports {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn dot_product_gradient() {
        // d/da sum(a*b) = b
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.5, -0.25, 0.8]));
        let b = Tensor::vector(vec![0.1, 0.7, -0.9]);
        let f = |g: &mut Graph, s: &ParamStore| {
            let av = g.param(s, a);
            let bv = g.constant(b.clone());
            let p = g.mul(av, bv)?;
            Ok(g.sum(p))
        };
        let r = GradCheck::default().run("dot", &mut store, f).unwrap();
        assert!(r.passed());
        let mut g = Graph::new();
        let loss = f(&mut g, &store).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(a).grad.as_deref(), Some(b.data()));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, REL_FLOOR), 0.0);
        assert!((relative_error(1e-9, 0.0, REL_FLOOR) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0, REL_FLOOR) - 0.5).abs() < 1e-12);
    }
}
