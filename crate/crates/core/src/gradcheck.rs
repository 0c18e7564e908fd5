//! Seeded finite-difference verification of the Meta-Kernel backward pass.

use crate::meta_kernel::{
    meta_kernel_backward, meta_kernel_forward, MetaKernelInput, MetaKernelParams, RADIUS,
};
use crate::tensor_ops::{finite_diff_grad, Activation, FeatureMap, SeededInit, TensorError};

/// Denominator floor of the relative error, so gradients that are zero on
/// both sides compare as equal.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    pub height: usize,
    pub width: usize,
    pub value_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Added to every analytic gradient; a negative control for the checker.
    pub perturbation: f64,
    /// Step used when screening instances for kinks; `None` uses `eps`.
    /// A fixed value keeps instances identical across an eps sweep.
    pub selection_eps: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            height: 4,
            width: 4,
            value_channels: 9,
            hidden: 16,
            out_channels: 4,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            perturbation: 0.0,
            selection_eps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Draws needed to find a kink-free instance.
    pub draws: u32,
    pub params_checked: usize,
    pub max_rel_error_params: f64,
    pub max_rel_error_values: f64,
}

impl SeedResult {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_params.max(self.max_rel_error_values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub seeds: Vec<SeedResult>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.seeds.iter().map(SeedResult::max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Instances tried per seed before giving up on a kink-free draw.
pub const MAX_INSTANCE_ATTEMPTS: u32 = 10_000;

/// Random geometry with ranges consistent with xyz, random values, a mask
/// that is ~80% valid, and parameters with non-zero biases.
pub fn sample_instance(seed: u64, cfg: &GradcheckConfig) -> (MetaKernelInput, MetaKernelParams) {
    let mut init = SeededInit::new(seed);
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let xyz = init.uniform(3 * n, 3.0);
    let mut geometry = FeatureMap::zeros(4, h, w);
    for i in 0..n {
        let (x, y, z) = (xyz[i], xyz[n + i], xyz[2 * n + i]);
        geometry.data[i] = (x * x + y * y + z * z).sqrt();
        geometry.data[n + i] = x;
        geometry.data[2 * n + i] = y;
        geometry.data[3 * n + i] = z;
    }
    let values = FeatureMap::from_vec(cfg.value_channels, h, w, init.uniform(cfg.value_channels * n, 1.0))
        .expect("sized");
    let mask = init.uniform(n, 1.0).into_iter().map(|v| v > -0.6).collect();
    let mut params = MetaKernelParams::seeded(cfg.value_channels, cfg.hidden, cfg.out_channels, &mut init);
    for l in &mut params.weight_mlp.layers {
        l.bias = init.uniform(l.bias.len(), 0.5);
    }
    params.aggregator_bias = init.uniform(cfg.out_channels, 0.5);
    (
        MetaKernelInput {
            geometry,
            values,
            mask,
        },
        params,
    )
}

/// True when no single-parameter step of size `eps` can move a ReLU
/// pre-activation of the first perceptron layer across zero, for any
/// (center, neighbor) pair the forward pass evaluates. Central differences
/// are only a valid reference for piecewise-linear units under this
/// condition.
pub fn kink_free(input: &MetaKernelInput, params: &MetaKernelParams, eps: f64) -> bool {
    let first = &params.weight_mlp.layers[0];
    if first.activation != Activation::Relu {
        return true;
    }
    let (h, w) = (input.values.height, input.values.width);
    let n = h * w;
    let g = &input.geometry.data;
    for i in 0..n {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -RADIUS..=RADIUS {
            for dx in -RADIUS..=RADIUS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = (ny * w as isize + nx) as usize;
                if !input.mask[j] {
                    continue;
                }
                let rel: Vec<f64> = (0..4).map(|c| g[c * n + j] - g[c * n + i]).collect();
                let reach = eps * rel.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for o in 0..first.outputs {
                    let row = &first.weight[o * first.inputs..(o + 1) * first.inputs];
                    let z = first.bias[o] + row.iter().zip(&rel).map(|(a, b)| a * b).sum::<f64>();
                    if z.abs() <= reach {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// First kink-free draw for `seed`, with the number of draws it took.
pub fn random_instance(seed: u64, cfg: &GradcheckConfig) -> (MetaKernelInput, MetaKernelParams, u32) {
    for attempt in 0..MAX_INSTANCE_ATTEMPTS {
        let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt as u64);
        let (input, params) = sample_instance(sub_seed, cfg);
        if kink_free(&input, &params, cfg.selection_eps.unwrap_or(cfg.eps)) {
            return (input, params, attempt + 1);
        }
    }
    panic!("no kink-free instance for seed {seed} in {MAX_INSTANCE_ATTEMPTS} draws");
}

/// Compares analytic gradients of `sum(forward)` against central
/// differences, over every parameter and every value entry.
pub fn check_seed(seed: u64, cfg: &GradcheckConfig) -> Result<SeedResult, TensorError> {
    let (input, params, draws) = random_instance(seed, cfg);
    let out = meta_kernel_forward(&input, &params)?;
    let upstream = FeatureMap::filled(out.channels, out.height, out.width, 1.0);
    let (grads, grad_values) = meta_kernel_backward(&input, &params, &upstream)?;

    let flat = params.to_flat();
    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |theta| {
            probe.set_flat(theta);
            meta_kernel_forward(&input, &probe).map_or(f64::NAN, |o| o.data.iter().sum())
        },
        &flat,
        cfg.eps,
    )?;
    let max_rel_error_params = grads
        .to_flat()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a + cfg.perturbation, n))
        .fold(0.0, f64::max);

    let mut probe_input = input.clone();
    let numeric_values = finite_diff_grad(
        |v| {
            probe_input.values.data.copy_from_slice(v);
            meta_kernel_forward(&probe_input, &params).map_or(f64::NAN, |o| o.data.iter().sum())
        },
        &input.values.data,
        cfg.eps,
    )?;
    let max_rel_error_values = grad_values
        .data
        .iter()
        .zip(&numeric_values)
        .map(|(&a, &n)| relative_error(a + cfg.perturbation, n))
        .fold(0.0, f64::max);

    Ok(SeedResult {
        seed,
        draws,
        params_checked: flat.len(),
        max_rel_error_params,
        max_rel_error_values,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, TensorError> {
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| check_seed(s, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradcheckReport {
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        seeds,
    })
}
