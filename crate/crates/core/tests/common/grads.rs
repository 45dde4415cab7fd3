//! Reverse-mode gradients against central finite differences evaluated in
//! f64, for every differentiable op and the full tiny-preset path.

use fvpy::model::{Model, Preset};
use fvpy::tensor::{
    grad_check, Differentiable, GradCheckConfig, Real, Tape, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const F32_TOL: f64 = 1e-3;
pub const F64_TOL: f64 = 1e-5;
pub const POINTS: u64 = 5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Distinct values at least 0.02 apart and away from zero, so a finite
/// difference step cannot cross a relu kink or swap a max-pool winner.
fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.02 + 0.003)
        .collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Fixed random projection to a scalar so every output coordinate matters.
fn project<T: Real>(tape: &mut Tape<T>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(v).numel();
    let w = (0..n)
        .map(|_| T::lit(rng.random_range(-1.0..1.0)))
        .collect();
    tape.weighted_sum(v, w)
}

fn check<F: Differentiable>(
    name: &str,
    f: &F,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    max_coords: usize,
) {
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let inputs = make(&mut rng);
        let c32 = GradCheckConfig {
            step: 1e-3,
            max_coords,
            seed: point,
            kink_threshold: None,
        };
        let r32 = grad_check::<f32, _>(f, &inputs, &c32).unwrap();
        assert!(
            r32.max_rel_error <= F32_TOL,
            "{name} f32 point {point}: {r32:?}"
        );
        let c64 = GradCheckConfig { step: 1e-5, ..c32 };
        let r64 = grad_check::<f64, _>(f, &inputs, &c64).unwrap();
        assert!(
            r64.max_rel_error <= F64_TOL,
            "{name} f64 point {point}: {r64:?}"
        );
    }
}

macro_rules! func {
    ($name:ident, |$tape:ident, $x:ident| $body:expr) => {
        struct $name;
        impl Differentiable for $name {
            fn eval<T: Real>(&self, $tape: &mut Tape<T>, $x: &[Var]) -> Result<Var, TensorError> {
                $body
            }
        }
    };
}

func!(Conv, |t, x| {
    let y = t.conv2d(x[0], x[1], Some(x[2]), 2, 1)?;
    project(t, y, 1)
});
func!(ConvBatched, |t, x| {
    let y = t.conv2d(x[0], x[1], None, 1, 0)?;
    project(t, y, 2)
});
func!(Linear, |t, x| {
    let y = t.linear(x[0], x[1], x[2])?;
    project(t, y, 3)
});
func!(Relu, |t, x| {
    let y = t.relu(x[0]);
    project(t, y, 4)
});
func!(MaxPool, |t, x| {
    let y = t.max_pool(x[0], 3, 2, 1)?;
    project(t, y, 5)
});
func!(Softmax, |t, x| {
    let y = t.softmax_flat(x[0]);
    project(t, y, 6)
});
func!(Spatialize, |t, x| {
    let y = t.spatialize(x[0])?;
    project(t, y, 7)
});
func!(L1, |t, x| t.l1_loss(x[0], x[1]));
func!(AddScaleReshape, |t, x| {
    let s = t.add(x[0], x[1])?;
    let s = t.scale(s, T::lit(-1.7));
    let s = t.reshape(s, &[12])?;
    project(t, s, 8)
});
func!(BatchNorm, |t, x| {
    let y = t.batch_norm(x[0], x[1], x[2])?;
    project(t, y, 9)
});
func!(RowTransform, |t, x| {
    let y = t.row_transform(
        x[0],
        vec![
            [T::lit(0.9), T::lit(-0.3), T::lit(0.3), T::lit(0.9)],
            [T::lit(1.05), T::zero(), T::zero(), T::lit(1.05)],
        ],
    )?;
    project(t, y, 10)
});

pub fn conv2d() {
    check(
        "conv2d",
        &Conv,
        |r| {
            vec![
                rand_tensor(r, &[2, 7, 6], 1.0),
                rand_tensor(r, &[3, 2, 3, 3], 1.0),
                rand_tensor(r, &[3], 1.0),
            ]
        },
        0,
    );
    check(
        "conv2d batched",
        &ConvBatched,
        |r| {
            vec![
                rand_tensor(r, &[2, 1, 5, 5], 1.0),
                rand_tensor(r, &[2, 1, 2, 2], 1.0),
            ]
        },
        0,
    );
}

pub fn linear() {
    check(
        "linear",
        &Linear,
        |r| {
            vec![
                rand_tensor(r, &[5], 1.0),
                rand_tensor(r, &[4, 5], 1.0),
                rand_tensor(r, &[4], 1.0),
            ]
        },
        0,
    );
    check(
        "linear batched",
        &Linear,
        |r| {
            vec![
                rand_tensor(r, &[3, 5], 1.0),
                rand_tensor(r, &[4, 5], 1.0),
                rand_tensor(r, &[4], 1.0),
            ]
        },
        0,
    );
}

pub fn relu_and_pool() {
    check("relu", &Relu, |r| vec![separated_tensor(r, &[20])], 0);
    check(
        "max_pool",
        &MaxPool,
        |r| vec![separated_tensor(r, &[2, 2, 6, 6])],
        0,
    );
}

pub fn softmax_and_spatialize() {
    check(
        "softmax_flat",
        &Softmax,
        |r| vec![rand_tensor(r, &[8, 8], 2.0)],
        0,
    );
    check(
        "spatialize",
        &Spatialize,
        |r| vec![rand_tensor(r, &[3, 8, 8], 2.0)],
        0,
    );
    check(
        "spatialize batched",
        &Spatialize,
        |r| vec![rand_tensor(r, &[2, 2, 4, 5], 2.0)],
        0,
    );
}

pub fn l1_and_plumbing() {
    check(
        "l1",
        &L1,
        |r| vec![rand_tensor(r, &[2], 5.0), rand_tensor(r, &[2], 5.0)],
        0,
    );
    check(
        "add/scale/reshape",
        &AddScaleReshape,
        |r| vec![rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[3, 4], 1.0)],
        0,
    );
    check(
        "row_transform",
        &RowTransform,
        |r| vec![rand_tensor(r, &[2, 2], 3.0)],
        0,
    );
}

pub fn batch_norm() {
    check(
        "batch_norm",
        &BatchNorm,
        |r| {
            vec![
                rand_tensor(r, &[3, 2, 3, 3], 1.0),
                rand_tensor(r, &[2], 1.0),
                rand_tensor(r, &[2], 1.0),
            ]
        },
        0,
    );
}

/// patch → CNN(tiny) → spatialize → MLP → ℓ1, with respect to every
/// parameter tensor (coordinates subsampled).
struct TinyPath {
    model: Model,
    target: [f64; 2],
}

impl Differentiable for TinyPath {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var, TensorError> {
        let patch = x[0];
        let vars = &x[1..];
        let y = self
            .model
            .forward_glimpses(tape, vars, patch, 1)
            .map_err(|e| TensorError::InvalidArgument {
                op: "tiny path",
                detail: e.to_string(),
            })?;
        let target = tape.constant(Tensor::new(
            vec![1, 2],
            vec![T::lit(self.target[0]), T::lit(self.target[1])],
        )?);
        tape.l1_loss(y, target)
    }
}

pub fn tiny_composite_path() {
    for point in 0..POINTS {
        let model = Model::new(Preset::Tiny, 1, 50 + point);
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + point);
        let mut inputs = vec![Tensor::new(
            vec![1, 1, 64, 64],
            (0..4096).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()];
        for p in &model.params.params {
            let mut t: Tensor<f64> = p.value.cast();
            // nonzero biases so every parameter receives a generic gradient
            if p.name.ends_with("bias") {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
            inputs.push(t);
        }
        let f = TinyPath {
            model,
            target: [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)],
        };
        let c32 = GradCheckConfig {
            step: 1e-3,
            max_coords: 6,
            seed: point,
            // a kink inside the step biases the central difference by half
            // the slope jump, so skip anything that could exceed the tolerance
            kink_threshold: Some(F32_TOL),
        };
        let r32 = grad_check::<f32, _>(&f, &inputs, &c32).unwrap();
        assert!(
            r32.max_rel_error <= F32_TOL,
            "tiny f32 point {point}: {r32:?}"
        );
        assert!(
            r32.skipped * 10 <= r32.checked,
            "tiny f32 point {point}: {r32:?}"
        );
        let c64 = GradCheckConfig {
            step: 1e-5,
            kink_threshold: Some(F64_TOL),
            ..c32
        };
        let r64 = grad_check::<f64, _>(&f, &inputs, &c64).unwrap();
        assert!(
            r64.max_rel_error <= F64_TOL,
            "tiny f64 point {point}: {r64:?}"
        );
        assert!(
            r64.skipped * 10 <= r64.checked,
            "tiny f64 point {point}: {r64:?}"
        );
    }
}

pub fn all_ops() {
    conv2d();
    linear();
    relu_and_pool();
    softmax_and_spatialize();
    l1_and_plumbing();
    batch_norm();
}
