//! IDX ingestion, synthetic blobs and checkpoint persistence.

use std::path::PathBuf;

use idkm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use idkm::data::{dataset_from_idx, idx_bytes, load_idx, load_mnist, synthetic_blobs, write_idx, Dataset};
use idkm::nn::{Network, NetworkSpec};
use idkm::Codebook;
use proptest::prelude::*;

fn mnist_dir() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("IDKM_DATA_DIR")?);
    [root.clone(), root.join("mnist")]
        .into_iter()
        .find(|d| d.join("t10k-labels-idx1-ubyte").is_file())
}

/// Label counts read straight from the file bytes.
fn recount_labels(bytes: &[u8]) -> Vec<usize> {
    assert_eq!(u32::from_be_bytes(bytes[0..4].try_into().unwrap()), 0x0000_0801);
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 8 + n);
    let mut hist = vec![0; 10];
    for &b in &bytes[8..] {
        hist[b as usize] += 1;
    }
    hist
}

fn fixture() -> (Vec<u8>, Vec<u8>) {
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 3];
    img.extend((0..18u8).map(|i| i * 14));
    let lab = vec![0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
    (img, lab)
}

#[test]
fn fixture_round_trips_byte_for_byte() {
    let (img, lab) = fixture();
    let ds = dataset_from_idx("fx", &img, &lab).unwrap();
    assert_eq!(ds.sample_shape, vec![1, 2, 3]);
    assert_eq!(ds.labels, vec![7, 0, 9]);
    assert_eq!(ds.sample(1)[0], 84.0 / 255.0);
    let (i2, l2) = idx_bytes(&ds).unwrap();
    assert_eq!(i2, img);
    assert_eq!(l2, lab);

    let dir = tempfile::tempdir().unwrap();
    let (pi, pl) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&ds, &pi, &pl).unwrap();
    let back = load_idx(&pi, &pl).unwrap();
    assert_eq!(back.inputs, ds.inputs);
    assert_eq!(std::fs::read(&pi).unwrap(), img);
}

#[test]
fn labels_passed_as_images_is_rejected() {
    let (img, lab) = fixture();
    let err = dataset_from_idx("fx", &img, &img).unwrap_err();
    assert!(err.to_string().contains("offset"), "{err}");
    assert!(dataset_from_idx("fx", &lab, &lab).is_err());
}

#[test]
fn official_test_set_histogram() {
    let Some(dir) = mnist_dir() else {
        println!("skipped: MNIST not found under IDKM_DATA_DIR");
        return;
    };
    let ds = load_mnist(&dir, false).unwrap();
    assert_eq!(ds.len(), 10_000);
    let raw = std::fs::read(dir.join("t10k-labels-idx1-ubyte")).unwrap();
    let hist = recount_labels(&raw);
    assert_eq!(ds.label_histogram(), hist);
    assert_eq!(hist[0], 980);
    assert!(ds.inputs.iter().all(|&x| (0.0..=1.0).contains(&x)));

    let (img, lab) = idx_bytes(&ds).unwrap();
    assert_eq!(lab, raw);
    assert_eq!(img, std::fs::read(dir.join("t10k-images-idx3-ubyte")).unwrap());
}

/// Least-squares linear probe with a bias column, one-hot targets.
fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let (x, y) = train.gather(&(0..train.len()).collect::<Vec<_>>());
    let f = train.sample_len();
    let c = train.num_classes;
    let n = train.len();
    let a = nalgebra::DMatrix::from_fn(n, f + 1, |i, j| if j == f { 1.0 } else { x[i * f + j] });
    let b = nalgebra::DMatrix::from_fn(n, c, |i, j| if y[i] == j { 1.0 } else { 0.0 });
    let beta = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
    let (xt, yt) = test.gather(&(0..test.len()).collect::<Vec<_>>());
    let mut hits = 0;
    for i in 0..test.len() {
        let scores: Vec<f64> = (0..c)
            .map(|k| beta[(f, k)] + (0..f).map(|j| xt[i * f + j] * beta[(j, k)]).sum::<f64>())
            .collect();
        let best = (0..c).max_by(|&p, &q| scores[p].total_cmp(&scores[q])).unwrap();
        hits += usize::from(best == yt[i]);
    }
    hits as f64 / test.len() as f64
}

#[test]
fn separated_blobs_are_linearly_separable() {
    for (classes, dim) in [(2, 1), (3, 3), (4, 2), (4, 8)] {
        let all = synthetic_blobs(5, classes, 400, dim, 6.0).unwrap();
        let (test, train) = all.split_at(all.len() / 4);
        let acc = linear_probe_accuracy(&train, &test);
        assert!(acc >= 0.99, "classes {classes} dim {dim}: {acc}");
    }
}

#[test]
fn zero_separation_shares_one_center() {
    let ds = synthetic_blobs(3, 4, 2000, 2, 0.0).unwrap();
    let f = ds.sample_len();
    for class in 0..4 {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        let (x, _) = ds.gather(&idx);
        for j in 0..f {
            let mean = (0..idx.len()).map(|r| x[r * f + j]).sum::<f64>() / idx.len() as f64;
            assert!(mean.abs() < 0.15, "class {class} coord {j}: {mean}");
        }
    }
    let (test, train) = ds.split_at(2000);
    assert!(linear_probe_accuracy(&train, &test) < 0.35);
}

fn small_net() -> Network {
    Network::new(NetworkSpec::mlp(3, 5, 2)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(vals in prop::collection::vec(-1e6f32..1e6, 32), k in 1usize..=4) {
        let net = small_net();
        let mut params = net.init_params::<f32>(0);
        let mut it = vals.iter().cycle();
        for p in params.layers.iter_mut().flatten() {
            for x in p.weight.iter_mut().chain(p.bias.iter_mut()) {
                *x = *it.next().unwrap();
            }
        }
        let book = Codebook::new(vals[..k].to_vec(), k, 1).unwrap();
        let ckpt = Checkpoint {
            architecture: net.spec().clone(),
            params: params.clone(),
            codebooks: vec![(0, book)],
            config: serde_json::json!({ "k": k }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&back.params, &params);
        prop_assert_eq!(back.codebooks[0].1.as_slice(), &vals[..k]);
        prop_assert_eq!(back.bits_per_weight(0), Some((k as f64).log2()));
        prop_assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }
}
