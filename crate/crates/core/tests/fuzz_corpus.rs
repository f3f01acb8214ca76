//! Replays the checked-in fuzz seeds through the same entry points as the
//! fuzz targets, so parser regressions show up without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use xai_eval::{io, metrics, npy, pipeline, refnet};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn truncations(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let step = (bytes.len() / 64).max(1);
    (0..bytes.len()).step_by(step).map(move |n| &bytes[..n])
}

#[test]
fn npy_seeds_parse_and_truncations_fail_cleanly() {
    for (name, bytes) in seeds("npy") {
        let arr = npy::parse(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        let _ = io::heatmap_from_npy(arr.clone());
        let _ = io::mask_from_npy(arr.clone());
        let _ = io::image_from_npy(arr);
        for cut in truncations(&bytes) {
            assert!(npy::parse(cut).is_err(), "{name} truncated to {}", cut.len());
        }
    }
}

#[test]
fn png_seeds_decode() {
    for (name, bytes) in seeds("png_mask") {
        io::mask_from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        for cut in truncations(&bytes) {
            let _ = io::mask_from_bytes(cut);
        }
    }
}

#[test]
fn text_seeds_run_through_their_parsers() {
    for (name, bytes) in seeds("dataset_manifest") {
        let _ = io::Manifest::from_json(std::str::from_utf8(&bytes).unwrap(), "/tmp");
        assert!(name != "generated.json" || io::Manifest::from_json(std::str::from_utf8(&bytes).unwrap(), "/").is_ok());
    }
    for (name, bytes) in seeds("explain_manifest") {
        pipeline::ExplainManifest::from_json(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("score_csv") {
        metrics::read_scores_csv(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("run_config") {
        pipeline::RunConfig::from_toml(std::str::from_utf8(&bytes).unwrap())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("topology") {
        refnet::Topology::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn hostile_inputs_are_rejected() {
    let escape = r#"{"provenance":{"tool":"x","version":"0","command":"explain","config_hash":"","seeds":[]},
        "model_id":"m","model":{"source":"seed","seed":1},"dataset_manifest":"d","split":"test",
        "target_mode":"predicted","attribution":{},"methods":["saliency"],
        "entries":[{"image_id":"a","method_id":"saliency","heatmap_path":"../../etc/passwd","target":0,"height":1,"width":1}]}"#;
    assert!(pipeline::ExplainManifest::from_json(escape).is_err());
    assert!(pipeline::ExplainManifest::from_json(&escape.replace("../../etc/passwd", "/etc/passwd")).is_err());
    assert!(pipeline::ExplainManifest::from_json(&escape.replace("../../etc/passwd", "a.saliency.npy")).is_ok());

    let mut huge = b"\x93NUMPY\x01\x00".to_vec();
    let header = "{'descr': '<f8', 'fortran_order': False, 'shape': (4294967296, 4294967296), }";
    huge.extend((header.len() as u16 + 1).to_le_bytes());
    huge.extend(header.as_bytes());
    huge.push(b'\n');
    assert!(npy::parse(&huge).is_err());
}
