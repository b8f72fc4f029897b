use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cra::{build_grouping, cra_loss_on};
use crate::encoder::{encode_on, project_on, two_view_pairing, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::numerics::{grad_check, GradCheckReport, Tensor};
use crate::proxy::{pc_loss_on, pcl_loss_on, proxy_reg_loss_on};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Finite-difference checks of every loss and of the encoder composite on
/// small random problems, `seeds` draws each.
pub fn gradcheck_suite(seeds: u64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let grouping = build_grouping(8, 2, 2)?;
        let fm = random(&[2, 8, 2, 2], &mut rng);
        reports.push(grad_check("cra", |t, v| cra_loss_on(t, v[0], &grouping), &[fm], tolerance)?);

        let labels = [0, 3, 1, 4, 2, 0];
        let v = random(&[6, 5], &mut rng);
        let p = random(&[5, 5], &mut rng);
        reports.push(grad_check(
            "pc",
            |t, x| pc_loss_on(t, x[0], x[1], &labels, 2),
            &[v, p],
            tolerance,
        )?);

        let p = random(&[4, 3], &mut rng);
        reports.push(grad_check("reg", |t, x| proxy_reg_loss_on(t, x[0]), &[p], tolerance)?);

        let pairing = two_view_pairing(3);
        let views = random(&[6, 4], &mut rng);
        let old = random(&[3, 4], &mut rng);
        let new = random(&[2, 4], &mut rng);
        reports.push(grad_check(
            "pcl",
            |t, x| pcl_loss_on(t, x[0], &pairing, &[x[1], x[2]], 0.1),
            &[views, old, new],
            tolerance,
        )?);

        let cfg = EncoderConfig {
            input_dims: [1, 8, 8],
            feature_dims: [8, 2, 2],
            conv_channels: [3, 4],
            mlp_hidden: 6,
            embed_dim: 4,
            head_norm: true,
            positional_bias: true,
            seed,
        };
        let params = EncoderParams::init(&cfg)?;
        let input = random(&[2, 1, 8, 8], &mut rng);
        let mut tensors = vec![input];
        // jitter so zero-initialized biases do not sit exactly on ReLU kinks
        for t in params.tensors() {
            let noise = random(t.shape(), &mut rng);
            tensors.push(Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.05 * noise.data()[i]));
        }
        reports.push(grad_check(
            "encode+project",
            |t, x| {
                let vars = params.bind(x[1..].to_vec());
                let fm = encode_on(t, &vars, x[0])?;
                project_on(t, &vars, fm)
            },
            &tensors,
            tolerance,
        )?);
    }
    Ok(reports)
}
