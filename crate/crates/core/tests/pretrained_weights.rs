//! Loading an externally produced VGG16 weight file and running the full-size
//! network on default-resolution inputs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crossview_core::backbone::{load_weights, BackboneConfig, Provenance, VGG16_WIDTHS};
use crossview_core::imageops::fov_crop;
use crossview_core::network::{Network, NetworkConfig};
use crossview_core::{Error, Tensor3};

/// Writes the file byte by byte, independently of the library encoder.
fn write_sanw(path: &std::path::Path, tensors: &[(String, Vec<usize>, Vec<f32>)]) {
    let mut f = std::fs::File::create(path).unwrap();
    f.write_all(b"SANW").unwrap();
    f.write_all(&1u32.to_le_bytes()).unwrap();
    f.write_all(&(tensors.len() as u32).to_le_bytes()).unwrap();
    for (name, dims, values) in tensors {
        f.write_all(&(name.len() as u16).to_le_bytes()).unwrap();
        f.write_all(name.as_bytes()).unwrap();
        f.write_all(&[dims.len() as u8]).unwrap();
        for d in dims {
            f.write_all(&(*d as u32).to_le_bytes()).unwrap();
        }
        for v in values {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
    }
}

fn checksum(values: impl Iterator<Item = f32>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The ten pretrained convolutions: 20 tensors in `[3, 3, C_in, C_out]` layout.
fn exporter_tensors(seed: u64) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = 3;
    let mut out = Vec::new();
    for (i, &cout) in VGG16_WIDTHS.iter().take(10).enumerate() {
        let w: Vec<f32> = (0..9 * cin * cout).map(|_| rng.random_range(-0.05..0.05)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
        out.push((format!("conv{}.weight", i + 1), vec![3, 3, cin, cout], w));
        out.push((format!("conv{}.bias", i + 1), vec![cout], b));
        cin = cout;
    }
    out
}

#[test]
fn exported_file_loads_with_matching_checksums_and_drives_full_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg16.sanw");
    let exported = exporter_tensors(1);
    write_sanw(&path, &exported);

    let bundle = load_weights(&path).unwrap();
    assert_eq!(bundle.len(), 20);
    assert_eq!(bundle.provenance, Provenance::Pretrained);
    for (name, dims, values) in &exported {
        let t = bundle.get(name).unwrap();
        assert_eq!(&t.dims, dims, "{name}");
        assert_eq!(
            checksum(t.values.iter().map(|&v| v as f32)),
            checksum(values.iter().copied()),
            "{name}"
        );
    }

    let cfg = NetworkConfig::vgg16();
    let net = Network::with_pretrained(&cfg, &bundle, 10, 7).unwrap();
    for branch in net.branches() {
        for (i, conv) in branch.convs().iter().enumerate().take(10) {
            let (_, _, w) = &exported[2 * i];
            assert!(conv.weight.iter().zip(w).all(|(a, &b)| *a == b as f64));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut img = || Tensor3::from_fn(128, 512, 3, |_, _, _| rng.random_range(-1.0..1.0));
    let (ground, aerial, mask) = (img(), img(), img());
    assert_eq!(net.aerial_features(&aerial, &mask).unwrap().shape(), (4, 64, 16));
    assert_eq!(net.ground_features(&ground).unwrap().shape(), (4, 64, 16));
    let crop = fov_crop(&ground, 70.0, 300).unwrap();
    assert_eq!(crop.width(), 99);
    assert_eq!(net.ground_features(&crop).unwrap().shape(), (4, 13, 16));
}

#[test]
fn missing_tensor_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.sanw");
    let mut tensors = exporter_tensors(3);
    tensors.retain(|(n, _, _)| n != "conv4.bias");
    write_sanw(&path, &tensors);
    let bundle = load_weights(&path).unwrap();
    let err = Network::with_pretrained(&NetworkConfig::vgg16(), &bundle, 10, 0).unwrap_err();
    assert!(matches!(err, Error::MissingTensor(ref n) if n == "conv4.bias"), "{err}");
}

#[test]
fn wrong_layout_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transposed.sanw");
    let mut tensors = exporter_tensors(4);
    // Output-major layout as some frameworks store it.
    tensors[0].1 = vec![64, 3, 3, 3];
    write_sanw(&path, &tensors);
    let bundle = load_weights(&path).unwrap();
    let cfg = BackboneConfig::vgg16(8);
    assert!(matches!(
        Network::with_pretrained(&NetworkConfig::vgg16(), &bundle, 10, 0),
        Err(Error::Shape(_))
    ));
    assert_eq!(cfg.conv_shapes()[0].weight_dims(), vec![3, 3, 3, 64]);
}
