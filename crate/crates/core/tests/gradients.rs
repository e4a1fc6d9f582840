mod common;

use candle_core::{DType, Tensor, Var};
use guidir::dataset::{synth_texture, Palette, TextureParams, Vocabulary};
use guidir::degradation::{DegradationOp, DegradationSpec};
use guidir::denoiser::{zero_conv_forward, Branch, ControlledUNet, Prompt, UNetConfig, ZeroSft};
use guidir::nn::{Conv2d, ParamStore};
use guidir::robust_encoder::{reconstruction_loss, robust_loss, AeConfig, AutoEncoder};
use guidir::training::{denoising_loss, images_to_tensor, TrainSample};
use guidir::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{check_gradient, random_tensor, randomize};

const TOL: f64 = 1e-3;

fn assert_close(checks: &[common::DirectionalCheck]) {
    assert_eq!(checks.len(), 5);
    for c in checks {
        assert!(c.relative_error() <= TOL, "{c:?}");
    }
}

fn texture(seed: u64) -> guidir::imaging::Image {
    let params = TextureParams::random(&mut ChaCha8Rng::seed_from_u64(seed), Palette::Gray);
    synth_texture(&params, 8, 8).unwrap().0
}

#[test]
fn zerosft_weights_and_control_input() {
    let mut store = ParamStore::new(DType::F64, 1);
    let sft = ZeroSft::new(&mut store, "sft", 4, 6, 2).unwrap();
    randomize(&store, "sft", 0.4, 3);
    let x_f = random_tensor(&[2, 2, 4, 6], 4);
    let x_s = random_tensor(&[2, 6, 4, 6], 5);
    let x_c = Var::from_tensor(&random_tensor(&[2, 4, 4, 6], 6)).unwrap();
    let probe = random_tensor(&[2, 8, 4, 6], 7);
    let mut vars = store.all_vars();
    vars.push(x_c.clone());
    let loss = || -> Result<Tensor> { Ok((sft.forward(&x_f, &x_s, x_c.as_tensor())?.sqr()? * &probe)?.sum_all()?) };
    assert_close(&check_gradient(&vars, &loss, 5, 8).unwrap());
}

#[test]
fn zero_conv_at_initialization() {
    let mut store = ParamStore::new(DType::F64, 2);
    let conv = Conv2d::zeroed(&mut store, "zc", 3, 5, 1).unwrap();
    let x = random_tensor(&[1, 3, 5, 5], 9);
    let probe = random_tensor(&[1, 5, 5, 5], 10);
    let loss = || -> Result<Tensor> { Ok(((zero_conv_forward(&x, &conv)? - 0.5)?.sqr()? * &probe)?.sum_all()?) };
    let checks = check_gradient(&store.all_vars(), &loss, 5, 11).unwrap();
    assert_close(&checks);
    assert!(checks.iter().all(|c| c.autograd.abs() > 1e-8));
}

fn micro_unet() -> ControlledUNet {
    let cfg = UNetConfig {
        base_channels: 4,
        blocks_per_stage: 1,
        groups: 2,
        embed_dim: 8,
        fourier_features: 4,
        vocab_size: Vocabulary::default().len(),
        ..UNetConfig::default()
    };
    let net = ControlledUNet::new(cfg, DType::F64, 12).unwrap();
    randomize(&net.store, "connectors.", 0.3, 13);
    net
}

fn samples() -> Vec<TrainSample> {
    (0..2)
        .map(|i| {
            let spec = DegradationSpec::new(vec![DegradationOp::Blur { sigma: 1.2 }], i);
            TrainSample::positive(texture(20 + i), vec!["checker".into()], spec).unwrap()
        })
        .collect()
}

#[test]
fn denoising_loss_controlled_and_base_only() {
    let net = micro_unet();
    let samples = samples();
    let noise = random_tensor(&[2, 1, 8, 8], 14);
    let prompts = vec![Prompt::new(vec![1, 2]), Prompt::new(vec![])];
    for branch in [Branch::Controlled, Branch::BaseOnly] {
        let loss = || denoising_loss(&net, &samples, &[0.05, 1.5], &noise, &prompts, branch);
        assert_close(&check_gradient(&net.store.all_vars(), &loss, 5, 15).unwrap());
    }
}

#[test]
fn autoencoder_losses() {
    let ae = AutoEncoder::new(AeConfig { in_channels: 1, hidden: 3 }, DType::F64, 16).unwrap();
    let gt = images_to_tensor(&[texture(30), texture(31)], DType::F64).unwrap();
    let lq = (&gt + (random_tensor(&[2, 1, 8, 8], 17) * 0.05).unwrap()).unwrap();
    let le = || robust_loss(&ae, &lq, &gt);
    assert_close(&check_gradient(&ae.encoder_vars(), &le, 5, 18).unwrap());
    let rec = || reconstruction_loss(&ae, &gt);
    assert_close(&check_gradient(&ae.store.all_vars(), &rec, 5, 19).unwrap());
}
