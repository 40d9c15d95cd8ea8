use std::fs;
use std::sync::Mutex;

use deal::image::Image;
use deal::io::{load_image, save_image, BitDepth, Checkpoint, IoError, Manifest};
use deal::tensor::{Direction, OptimizerState, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Capture(Mutex<Vec<String>>);

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        self.0.lock().unwrap().push(format!("{} {}", record.level(), record.args()));
    }
    fn flush(&self) {}
}

static LOGS: Capture = Capture(Mutex::new(Vec::new()));

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w).map(|_| rng.gen()).collect()).unwrap()
}

fn requantized(img: &Image, depth: BitDepth) -> Image {
    let max = depth.max() as f32;
    img.map(|v| (v as f64 * max as f64 + 0.5).floor() as f32 / max)
}

#[test]
fn extreme_pixels_map_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.pgm");
    fs::write(&p, [b"P5\n2 1\n255\n".as_slice(), &[255, 0]].concat()).unwrap();
    let (img, depth) = load_image(&p).unwrap();
    assert_eq!(depth, BitDepth::Eight);
    assert_eq!(img.data(), &[1.0, 0.0]);

    let p = dir.path().join("b.pgm");
    fs::write(&p, [b"P5 1 2 65535 ".as_slice(), &[0, 0, 0xff, 0xff]].concat()).unwrap();
    let (img, depth) = load_image(&p).unwrap();
    assert_eq!(depth, BitDepth::Sixteen);
    assert_eq!((img.height(), img.width()), (2, 1));
    assert_eq!(img.data(), &[0.0, 1.0]);

    let p = dir.path().join("c.pgm");
    fs::write(&p, "P2\n# ascii\n3 1\n4\n0 2 4\n").unwrap();
    assert_eq!(load_image(&p).unwrap().0.data(), &[0.0, 0.5, 1.0]);
}

#[test]
fn half_rounds_up_when_quantized() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("half.pgm");
    save_image(&Image::filled(1, 1, 0.5), &p, BitDepth::Eight).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(*bytes.last().unwrap(), 128);
}

#[test]
fn out_of_range_values_are_clamped_with_a_warning() {
    let _ = log::set_logger(&LOGS).map(|_| log::set_max_level(log::LevelFilter::Warn));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("clamp.png");
    let img = Image::new(1, 3, vec![-0.5, 0.25, 1.7]).unwrap();
    save_image(&img, &p, BitDepth::Sixteen).unwrap();
    let back = load_image(&p).unwrap().0;
    assert_eq!(back.data()[0], 0.0);
    assert_eq!(back.data()[2], 1.0);
    let logs = LOGS.0.lock().unwrap();
    assert!(logs.iter().any(|l| l.starts_with("WARN") && l.contains("clamp.png") && l.contains("clamped 2")));
}

#[test]
fn png_and_pgm_decode_identically() {
    let dir = tempfile::tempdir().unwrap();
    let img = random_image(5, 7, 1);
    for depth in [BitDepth::Eight, BitDepth::Sixteen] {
        let a = dir.path().join("x.png");
        let b = dir.path().join("x.pgm");
        save_image(&img, &a, depth).unwrap();
        save_image(&img, &b, depth).unwrap();
        let (pa, da) = load_image(&a).unwrap();
        let (pb, db) = load_image(&b).unwrap();
        assert_eq!(pa, pb);
        assert_eq!((da, db), (depth, depth));
    }
}

#[test]
fn color_and_unknown_formats_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = dir.path().join("rgb.png");
    {
        let f = fs::File::create(&rgb).unwrap();
        let mut enc = png::Encoder::new(f, 2, 2);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[0; 12]).unwrap();
    }
    assert!(matches!(load_image(&rgb), Err(IoError::Color { .. })));
    let ppm = dir.path().join("c.ppm");
    fs::write(&ppm, "P3\n1 1\n255\n0 0 0\n").unwrap();
    assert!(matches!(load_image(&ppm), Err(IoError::Color { .. })));
    let junk = dir.path().join("j.png");
    fs::write(&junk, "hello").unwrap();
    assert!(matches!(load_image(&junk), Err(IoError::Unsupported { .. })));
    assert!(matches!(load_image(dir.path().join("missing.png")), Err(IoError::File { .. })));
    assert!(save_image(&Image::filled(1, 1, 0.0), dir.path().join("x.bmp"), BitDepth::Eight).is_err());
}

#[test]
fn manifest_splits_pairs_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    for (name, depth) in [("a.png", BitDepth::Eight), ("b.png", BitDepth::Eight), ("c.png", BitDepth::Sixteen)] {
        save_image(&random_image(8, 8, 2), dir.path().join(name), depth).unwrap();
    }
    save_image(&random_image(6, 8, 3), dir.path().join("odd.png"), BitDepth::Eight).unwrap();
    let path = dir.path().join("m.txt");
    fs::write(&path, "# data\na.png b.png\n@split test\nb.png  # trailing\n").unwrap();
    let m = Manifest::read(&path).unwrap();
    assert_eq!(m.splits(), vec!["train", "test"]);
    let train = m.load(Some("train"), 4).unwrap();
    assert_eq!(train.len(), 1);
    assert_eq!(train[0].name, "a");
    assert!(train[0].degraded.is_some());
    assert_eq!(m.load(None, 4).unwrap().len(), 2);

    let err = Manifest::parse("a.png\n\n@bogus x\n", &path).unwrap_err();
    assert!(matches!(err, IoError::Manifest { line: 3, .. }), "{err}");
    let mixed = Manifest::parse("a.png\nc.png\n", &path).unwrap();
    assert!(matches!(mixed.load(None, 4), Err(IoError::Dataset { .. })));
    let odd = Manifest::parse("odd.png\n", &path).unwrap();
    assert!(matches!(odd.load(None, 4), Err(IoError::Dataset { .. })));
    let missing = Manifest::parse("nope.png\n", &path).unwrap();
    assert!(missing.load(None, 4).is_err());
}

#[test]
fn config_text_reports_lines() {
    use deal::io::config::parse;
    let e = parse("[a]\nx = 1 # c\n\ny = 2\n").unwrap();
    assert_eq!(e.len(), 2);
    assert_eq!((e[1].section.as_str(), e[1].key.as_str(), e[1].value.as_str(), e[1].line), ("a", "y", "2", 4));
    assert!(matches!(parse("[a]\nx = 1\nx = 2\n"), Err(IoError::Config { line: 3, .. })));
    assert!(matches!(parse("[a\n"), Err(IoError::Config { line: 1, .. })));
    assert!(matches!(parse("\nnovalue\n"), Err(IoError::Config { line: 2, .. })));
    assert_eq!(e[0].list::<u32>().unwrap(), vec![1]);
}

fn sample_checkpoint() -> Checkpoint {
    let mut params = ParamStore::new();
    params.insert("cls.w", Tensor::new(vec![2, 3], vec![0.5, -1.0, 3.25, f32::MIN_POSITIVE, 1e-30, 7.0]).unwrap());
    let mut frozen = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
    frozen.requires_grad = false;
    params.insert("enh.bn.mean", frozen);
    let mut opt = OptimizerState::adam(1e-3);
    for (_, t) in params.iter_mut() {
        if t.requires_grad {
            t.grad = Some(vec![0.3; t.numel()]);
        }
    }
    opt.step(&mut params, Direction::Descent).unwrap();
    Checkpoint {
        seed: 42,
        iteration: 9,
        config: "[train]\nseed = 42\n".into(),
        state: vec![("epoch".into(), 3.0)],
        params,
        optimizers: vec![("enhancer".into(), opt)],
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let ck = sample_checkpoint();
    let bytes = ck.to_bytes();
    assert!(bytes.starts_with(b"DEALCKPT"));
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    ck.save(&p).unwrap();
    assert_eq!(fs::read(&p).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&p).unwrap(), ck);
}

#[test]
fn checkpoint_rejects_other_versions_and_truncation() {
    let mut bytes = sample_checkpoint().to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(IoError::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(IoError::Checkpoint(_))));
    bytes[8..10].copy_from_slice(&7u16.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(IoError::CheckpointVersion { found: 7, expected: 1 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_matches_requantization(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, sixteen in any::<bool>(), pgm in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let depth = if sixteen { BitDepth::Sixteen } else { BitDepth::Eight };
        let img = random_image(h, w, seed);
        let p = dir.path().join(if pgm { "r.pgm" } else { "r.png" });
        save_image(&img, &p, depth).unwrap();
        let (back, d) = load_image(&p).unwrap();
        prop_assert_eq!(d, depth);
        prop_assert_eq!(back, requantized(&img, depth));
    }
}
