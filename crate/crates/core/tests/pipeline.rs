use std::f64::consts::PI;

use bandcodec::audio_io::{read_wav, write_wav};
use bandcodec::codec::{snr_db, train, CodecConfig};
use bandcodec::{AudioBuffer, BandCodecModelF32, BandCodecModelF64, TokenStream, WavEncoding};

fn tones(lo: f64, hi: f64) -> AudioBuffer<f64> {
    let x = (0..24000)
        .map(|n| {
            let t = n as f64 / 24000.0;
            0.5 * (2.0 * PI * lo * t).sin() + 0.25 * (2.0 * PI * hi * t).sin()
        })
        .collect();
    AudioBuffer::new(x, 24000).unwrap()
}

fn config(epochs: usize) -> CodecConfig {
    let mut cfg = CodecConfig::preset("bands2", vec![5, 5]).unwrap();
    cfg.latent_dim = 16;
    cfg.seed = 21;
    cfg.epochs = epochs;
    cfg
}

#[test]
fn trained_model_survives_files_and_reencoding() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![tones(150.0, 3000.0), tones(600.0, 7500.0), tones(900.0, 4500.0)];
    let (model, log) = train(&data, &config(120)).unwrap();
    assert!(log.epochs[49].total_loss < log.epochs[0].total_loss);

    let wav = dir.path().join("in.wav");
    write_wav(&data[1], &wav, WavEncoding::Float32).unwrap();
    let x: AudioBuffer<f64> = read_wav(&wav).unwrap();

    let tokens = model.encode(&x).unwrap();
    let tok_path = dir.path().join("x.bstk");
    tokens.save(&tok_path).unwrap();
    assert_eq!(TokenStream::load(&tok_path).unwrap(), tokens);

    let model_path = dir.path().join("m.bscm");
    model.save(&model_path).unwrap();
    let reloaded = BandCodecModelF64::load(&model_path).unwrap();
    assert_eq!(reloaded.encode(&x).unwrap(), tokens);

    let y = model.decode(&tokens).unwrap();
    assert_eq!(y.len(), x.len());
    assert!(snr_db(&x, &y).unwrap() > 10.0);
    assert_eq!(model.encode(&y).unwrap(), tokens);
}

#[test]
fn f32_training_tracks_f64() {
    let data = vec![tones(300.0, 4500.0), tones(1200.0, 9000.0)];
    let (_, log64) = train(&data, &config(30)).unwrap();
    let data32: Vec<AudioBuffer<f32>> = data.iter().map(|x| x.convert()).collect();
    let (model32, log32) = train(&data32, &config(30)).unwrap();
    let (a, b) = (log64.epochs[29].total_loss, log32.epochs[29].total_loss);
    assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-3), "{a} vs {b}");

    let bytes = model32.to_bytes();
    assert_eq!(BandCodecModelF32::from_bytes(&bytes).unwrap(), model32);
}

#[test]
fn odd_lengths_round_trip_through_codec() {
    let (model, _) = train(&[tones(450.0, 6000.0)], &config(5)).unwrap();
    for len in [1, 319, 320, 321, 700, 5000] {
        let x = AudioBuffer::new(tones(450.0, 6000.0).samples()[..len].to_vec(), 24000).unwrap();
        let t = model.encode(&x).unwrap();
        assert_eq!(t.frame_count(), len.div_ceil(320));
        assert_eq!(model.decode(&t).unwrap().len(), len);
    }
}
