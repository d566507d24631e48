//! Finite-difference validation of the complete pipeline, shared by the
//! `gradcheck` subcommand and the test suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{total_loss, LossConfig};
use crate::model::{forward, init_random_all, ModelConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, TensorData};

/// Differentiate the full loss through the entire network on a random
/// cube of the given extent. Heads are randomized: the production zero
/// initialization would zero out most of the graph and leave nothing to
/// compare against.
pub fn full_network_check(
    extent: usize,
    config: &ModelConfig,
    loss: &LossConfig,
    opts: &GradCheckOptions,
    seed: u64,
) -> Result<GradCheckReport> {
    let template = init_random_all(config, seed)?;
    let mut inputs: Vec<TensorData> = template
        .flatten()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x766f6c);
    let dims = [1, 1, extent, extent, extent];
    inputs.push(TensorData::random_uniform(&dims, 0.0, 1.0, &mut rng));
    inputs.push(TensorData::random_uniform(&dims, 0.0, 1.0, &mut rng));

    grad_check("full_network_loss", &inputs, opts, |tape, vars| {
        let n = vars.len();
        let mut it = vars[..n - 2].iter().copied();
        let params = template.map_ref(&mut |_, _| it.next().expect("one var per leaf"));
        let (phi, _) = forward(tape, &params, config, vars[n - 2], vars[n - 1])?;
        total_loss(tape, vars[n - 2], vars[n - 1], phi, loss)
    })
}
