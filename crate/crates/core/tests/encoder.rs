use guidir::dataset::{generate_corpus, CorpusConfig};
use guidir::imaging::{psnr, Image};
use guidir::robust_encoder::{encode_lq, pretrain_autoencoder, AeConfig, AeTrainConfig};

#[test]
fn pretrained_autoencoder_reconstructs_held_out_textures() {
    let items = generate_corpus(&CorpusConfig {
        count: 288,
        seed: 21,
        ..CorpusConfig::default()
    })
    .unwrap();
    let (train, held) = items.split_at(256);
    let images: Vec<Image> = train.iter().map(|it| it.image.clone()).collect();
    let (ae, history) = pretrain_autoencoder(&images, AeConfig::default(), &AeTrainConfig::default()).unwrap();
    assert!(history.last().unwrap() < history.first().unwrap());
    let mean = held
        .iter()
        .map(|it| psnr(&encode_lq(&ae, &it.image).unwrap().1, &it.image).unwrap())
        .sum::<f64>()
        / held.len() as f64;
    assert!(mean >= 28.0, "held-out reconstruction {mean:.2} dB");
}
