use std::fs;
use std::path::{Path, PathBuf};

use bnfs::data::{
    center_crop_offsets, generate_synthetic, load_dataset, resized_dims, CropRecord, ImageBuffer, Split, MANIFEST,
};
use bnfs::eval::{evaluate, topk_error};
use bnfs::layers::ParamSet;
use bnfs::netdef::parse;
use bnfs::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POOL_NET: &str = "\
name pool_fc
input data 3 224 224
layer pool pool data pool mode=avg kernel=224 stride=1
layer fc fc pool fc out_features=5 bias_flag=1
layer loss softmax_loss fc+label loss
";

fn write_odd_sizes(root: &Path) {
    let dir = root.join("val");
    fs::create_dir_all(&dir).unwrap();
    let sizes = [(300, 256), (256, 400), (512, 300), (257, 257), (224, 320), (600, 480), (260, 700)];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut manifest = String::from("# classes=5\n");
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let data = (0..3 * h * w).map(|_| rng.random_range(0..256) as f32).collect();
        let name = format!("img{i}.png");
        ImageBuffer::new(h, w, data).unwrap().save_png(&dir.join(&name)).unwrap();
        manifest.push_str(&format!("{name}\t{}\n", i % 5));
    }
    fs::write(dir.join(MANIFEST), manifest).unwrap();
}

#[test]
fn one_center_crop_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    write_odd_sizes(tmp.path());
    let data = load_dataset(tmp.path(), Split::Val).unwrap();
    let net = parse(POOL_NET).unwrap();
    let params = ParamSet::<f32>::init(&net, 1).unwrap();
    let mut seen: Vec<CropRecord> = Vec::new();
    let mut forwards = 0;
    let mut probe = |r: &[CropRecord]| {
        forwards += 1;
        seen.extend_from_slice(r);
    };
    let r = evaluate(&net, &params, &data, 3, Some(&mut probe)).unwrap();
    assert_eq!(forwards, 3);
    assert_eq!(r.sample_count, data.len());
    assert_eq!(seen.len(), data.len());
    for (i, rec) in seen.iter().enumerate() {
        assert_eq!(rec.index, i);
        assert_eq!(rec.size, 224);
        let img = ImageBuffer::load_png(&data.dir.join(&data.items[i].path)).unwrap();
        let (h, w) = resized_dims(img.h, img.w, 256);
        assert_eq!(h.min(w), 256);
        assert_eq!((rec.top, rec.left), center_crop_offsets(h, w, 224));
    }
}

#[test]
fn evaluation_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    write_odd_sizes(tmp.path());
    let data = load_dataset(tmp.path(), Split::Val).unwrap();
    let net = parse(POOL_NET).unwrap();
    let params = ParamSet::<f32>::init(&net, 2).unwrap();
    let a = evaluate(&net, &params, &data, 4, None).unwrap();
    let b = evaluate(&net, &params, &data, 2, None).unwrap();
    assert_eq!(a, b);
}

fn oracle_error(scores: &[f32], labels: &[usize], classes: usize, k: usize) -> f64 {
    let mut misses = 0;
    for (row, &label) in scores.chunks(classes).zip(labels) {
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        if !order[..k].contains(&label) {
            misses += 1;
        }
    }
    misses as f64 / labels.len() as f64
}

#[test]
fn topk_error_matches_sort_oracle() {
    let (rows, classes) = (100_000, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scores: Vec<f32> = (0..rows * classes).map(|_| rng.random::<f32>()).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let s = Tensor::new(vec![rows, classes, 1, 1], scores.clone()).unwrap();
    let l = Tensor::new(vec![rows], labels.iter().map(|&v| v as f32).collect()).unwrap();
    for k in [1, 5] {
        assert_eq!(topk_error(&s, &l, k).unwrap(), oracle_error(&scores, &labels, classes, k), "k={k}");
    }
}

#[test]
fn untrained_net_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let classes = 8;
    generate_synthetic(tmp.path(), Split::Val, classes, 40, 32, 4).unwrap();
    let data = load_dataset(tmp.path(), Split::Val).unwrap().with_geometry(32, 28).unwrap();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata/desk_bn_cnn.ndef");
    let net = parse(&fs::read_to_string(path).unwrap()).unwrap();
    let params = ParamSet::<f32>::init(&net, 3).unwrap();
    let r = evaluate(&net, &params, &data, 64, None).unwrap();
    let p = 1.0 - 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / data.len() as f64).sqrt();
    assert!((r.top1_error - p).abs() <= 4.0 * sigma, "top-1 error {} vs chance {p}", r.top1_error);
}
