//! Files under fixtures/npy were written by `numpy.save`; re-encoding the
//! parsed arrays must reproduce them byte for byte.

use std::path::PathBuf;

use xai_eval::io::{read_heatmap, read_image, read_mask};
use xai_eval::npy::{self, Dtype};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/npy").join(name)
}

#[test]
fn reencoding_numpy_files_is_byte_identical() {
    let cases: [(&str, Dtype, &[usize]); 10] = [
        ("f8_2x2.npy", Dtype::F8, &[2, 2]),
        ("f4_5.npy", Dtype::F4, &[5]),
        ("f8_scalar.npy", Dtype::F8, &[]),
        ("f8_1x2x3x4x5.npy", Dtype::F8, &[1, 2, 3, 4, 5]),
        ("f8_224x224.npy", Dtype::F8, &[224, 224]),
        ("f4_3x7.npy", Dtype::F4, &[3, 7]),
        ("f8_1x32x32.npy", Dtype::F8, &[1, 32, 32]),
        ("f8_123456789x0.npy", Dtype::F8, &[123456789, 0]),
        ("u1_4x4.npy", Dtype::U1, &[4, 4]),
        ("b1_3x3.npy", Dtype::Bool, &[3, 3]),
    ];
    for (name, dtype, shape) in cases {
        let bytes = std::fs::read(fixture(name)).unwrap();
        let arr = npy::parse(&bytes).unwrap();
        assert_eq!(arr.dtype, dtype, "{name}");
        assert_eq!(arr.shape, shape, "{name}");
        assert_eq!(npy::encode(&arr.shape, &arr.data, arr.dtype), bytes, "{name}");
    }
}

#[test]
fn known_values_survive_decoding() {
    assert_eq!(npy::parse(&std::fs::read(fixture("f8_2x2.npy")).unwrap()).unwrap().data, [1.0, 2.0, 3.0, 4.0]);
    assert_eq!(npy::parse(&std::fs::read(fixture("f8_scalar.npy")).unwrap()).unwrap().data, [2.5]);
    assert_eq!(
        npy::parse(&std::fs::read(fixture("f4_5.npy")).unwrap()).unwrap().data,
        [0.0, 0.5, 1.0, 1.5, 2.0]
    );
}

#[test]
fn typed_readers_accept_interchange_files() {
    let map = read_heatmap(fixture("f8_224x224.npy")).unwrap();
    assert_eq!(map.shape(), (224, 224));
    let mask = read_mask(fixture("u1_4x4.npy")).unwrap();
    assert_eq!(mask.shape(), (4, 4));
    let bools = read_mask(fixture("b1_3x3.npy")).unwrap();
    assert_eq!(bools.count(), npy::parse(&std::fs::read(fixture("b1_3x3.npy")).unwrap()).unwrap().data.iter().filter(|&&v| v != 0.0).count());
    let image = read_image(fixture("f8_1x32x32.npy")).unwrap();
    assert_eq!(image.shape(), (1, 32, 32));
    assert!(read_heatmap(fixture("f8_1x2x3x4x5.npy")).is_err());
}
