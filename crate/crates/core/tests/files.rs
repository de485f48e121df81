use itse::checkpoint;
use itse::error::Error;
use itse::image;
use itse::language::Vocab;
use itse::metrics::BinaryMask;
use itse::model::{Model, ModelConfig};
use itse::synth::{self, SceneSpec};

fn small() -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        max_tokens: 6,
        plan: [4, 4, 8, 8, 8],
        decoder_width: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn checkpoint_file_round_trip_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.itse");
    let m = Model::<f32>::new(small(), Vocab::default_scene()).unwrap();
    checkpoint::save(&path, &m).unwrap();
    let back = checkpoint::load::<f32>(&path, Some(&m.config)).unwrap();
    let frames = synth::single_shape_scene().render_clip::<f32>();
    let q = m.encode_query("the red square").unwrap();
    let (a, b) = (m.run_clip(&frames, &q).unwrap(), back.run_clip(&frames, &q).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| x.logits.bit_eq(&y.logits)));
    let other = ModelConfig { width: 16, heads: 2, ..small() };
    assert!(matches!(checkpoint::load::<f32>(&path, Some(&other)), Err(Error::ConfigMismatch(_))));
}

#[test]
fn rendered_frames_and_masks_survive_image_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = synth::two_square_scene();
    let samples = synth::generate::<f64>(&spec).unwrap();
    for (t, frame) in samples[0].frames.iter().enumerate() {
        let path = dir.path().join(format!("f{t}.ppm"));
        image::write_ppm(&path, frame).unwrap();
        assert!(image::read_ppm::<f64>(&path).unwrap().bit_eq(frame));
    }
    for (t, mask) in samples[1].masks.iter().enumerate() {
        let path = dir.path().join(format!("m{t}.pgm"));
        image::write_pgm(&path, mask).unwrap();
        let back: BinaryMask = image::read_pgm(&path).unwrap();
        assert_eq!(&back, mask);
    }
}

#[test]
fn scene_spec_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    let spec = synth::single_shape_scene();
    std::fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(SceneSpec::load(&path).unwrap(), spec);
}
