use std::fs;
use std::io::Write;

use msfin::feature_io::{
    import_raw_tensor, read_dataset, write_dataset, write_raw_tensor, DatasetReader, DatasetWriter, LabelEntry,
    RawLayout, SequenceRecord, Split, FORMAT_VERSION,
};
use msfin::synthetic::{generate_dataset, Archetype, ScenarioSpec};
use msfin::tensor::Tensor;
use msfin::Error;
use tempfile::tempdir;

fn toy_records(n: usize, seed: u64) -> Vec<SequenceRecord> {
    generate_dataset(n, &ScenarioSpec::toy(Archetype::Sudden), seed)
        .unwrap()
        .records
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("toy.msfd");
    let mut recs = toy_records(2, 1);
    // Odd values survive unchanged.
    recs[0].frames.data_mut()[0] = f32::MIN_POSITIVE / 4.0;
    recs[0].frames.data_mut()[1] = -0.0;
    let manifest = write_dataset(&path, &recs).unwrap();
    assert_eq!(manifest.format_version, FORMAT_VERSION);
    assert_eq!(manifest.records.len(), recs.len());
    let back: Vec<SequenceRecord> = read_dataset(&path).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!((a.label, a.t_ao, a.fps), (b.label, b.t_ao, b.fps));
        assert_eq!(a.mask, b.mask);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.frames), bits(&b.frames));
        assert_eq!(bits(&a.objects), bits(&b.objects));
    }
}

#[test]
fn random_access_and_split_tags() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("split.msfd");
    let recs = toy_records(1, 2);
    let mut w = DatasetWriter::create(&path).unwrap();
    for (i, r) in recs.iter().enumerate() {
        w.append(r, Some(if i % 2 == 0 { Split::Train } else { Split::Test }))
            .unwrap();
    }
    let manifest = w.finish().unwrap();
    // Offsets tile the record area.
    for pair in manifest.records.windows(2) {
        assert_eq!(pair[0].offset + pair[0].length, pair[1].offset);
    }
    let mut r = DatasetReader::open(&path).unwrap();
    assert_eq!(r.manifest(), &manifest);
    let i = r.find(&recs[3].id).unwrap();
    assert_eq!(r.read_record(i).unwrap(), recs[3]);
    let all = r.read_all().unwrap();
    assert_eq!(all[1].1, Some(Split::Test));
    assert_eq!(all[4].0, recs[4]);
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("empty.msfd");
    let m = write_dataset(&path, &[]).unwrap();
    assert!(m.records.is_empty());
    let r = DatasetReader::open(&path).unwrap();
    assert!(r.is_empty());
    assert_eq!(read_dataset(&path).unwrap().count(), 0);
}

#[test]
fn writes_are_deterministic() {
    let dir = tempdir().unwrap();
    let recs = toy_records(2, 3);
    let a = dir.path().join("a.msfd");
    let b = dir.path().join("b.msfd");
    write_dataset(&a, &recs).unwrap();
    write_dataset(&b, &recs).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("x.msfd");
    write_dataset(&path, &toy_records(1, 4)).unwrap();
    let bytes = fs::read(&path).unwrap();

    let bad = dir.path().join("magic.msfd");
    let mut b = bytes.clone();
    b[0] = b'X';
    fs::write(&bad, &b).unwrap();
    assert!(matches!(DatasetReader::open(&bad), Err(Error::BadMagic { .. })));

    let mut b = bytes.clone();
    b[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&bad, &b).unwrap();
    assert!(matches!(
        DatasetReader::open(&bad),
        Err(Error::VersionMismatch { found: 7, .. })
    ));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&bad, &bytes[..cut]).unwrap();
        let e = DatasetReader::open(&bad);
        assert!(
            matches!(e, Err(Error::CorruptHeader(_)) | Err(Error::BadMagic { .. })),
            "cut {cut}: {:?}",
            e.err()
        );
    }
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(DatasetReader::open(&bad), Err(Error::CorruptHeader(_))));
}

#[test]
fn invalid_records_are_rejected_naming_the_id() {
    let dir = tempdir().unwrap();
    let mut rec = toy_records(1, 5).remove(0);
    assert_eq!(rec.label, 1);
    rec.t_ao = None;
    match rec.validate() {
        Err(Error::Data { record, .. }) => assert_eq!(record, rec.id),
        other => panic!("{other:?}"),
    }
    assert!(write_dataset(dir.path().join("bad.msfd"), [&rec]).is_err());

    let mut rec = toy_records(1, 5).remove(0);
    rec.t_ao = Some(51);
    assert!(matches!(rec.validate(), Err(Error::Data { .. })));

    // A record corrupted on disk is caught by the reader.
    let rec = toy_records(1, 5).remove(0);
    let path = dir.path().join("flip.msfd");
    write_dataset(&path, [&rec]).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let label_at = 8 + 4 + rec.id.len();
    bytes[label_at + 1..label_at + 5].copy_from_slice(&0u32.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    let mut r = DatasetReader::open(&path).unwrap();
    match r.read_record(0) {
        Err(Error::Data { record, .. }) => assert_eq!(record, rec.id),
        other => panic!("{other:?}"),
    }
}

fn sidecar(path: &std::path::Path, entries: &[LabelEntry]) {
    let mut f = fs::File::create(path).unwrap();
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e).unwrap()).unwrap();
    }
}

fn zero_blob(path: &std::path::Path, layout: RawLayout, count: usize) {
    let (t, c, d) = layout.dims();
    fs::File::create(path)
        .unwrap()
        .set_len((count * t * c * d * 4) as u64)
        .unwrap();
}

#[test]
fn raw_layouts_parse() {
    assert_eq!("dad".parse::<RawLayout>().unwrap().dims(), (100, 20, 4096));
    assert_eq!("dada".parse::<RawLayout>().unwrap().dims(), (150, 16, 4096));
    assert_eq!("50x7x64".parse::<RawLayout>().unwrap().dims(), (50, 7, 64));
    assert!("50x1x64".parse::<RawLayout>().is_err());
    assert!("huh".parse::<RawLayout>().is_err());
}

#[test]
fn zero_dad_blob_imports_as_fully_masked() {
    let dir = tempdir().unwrap();
    let blob = dir.path().join("dad.bin");
    let side = dir.path().join("dad.jsonl");
    zero_blob(&blob, RawLayout::Dad, 1);
    sidecar(
        &side,
        &[LabelEntry {
            id: "v0".into(),
            label: 0,
            t_ao: None,
            fps: 20,
        }],
    );
    let recs = import_raw_tensor(&blob, RawLayout::Dad, &side).unwrap();
    assert_eq!(recs.len(), 1);
    let r = &recs[0];
    assert_eq!(r.frames.shape(), &[100, 4096]);
    assert_eq!(r.objects.shape(), &[100, 19, 4096]);
    assert!(r.mask.iter().all(|&m| !m));
    assert_eq!(r.label, 0);
}

#[test]
fn dada_layout_has_fifteen_objects() {
    let dir = tempdir().unwrap();
    let blob = dir.path().join("dada.bin");
    let side = dir.path().join("dada.jsonl");
    zero_blob(&blob, RawLayout::Dada, 1);
    sidecar(
        &side,
        &[LabelEntry {
            id: "d0".into(),
            label: 1,
            t_ao: Some(120),
            fps: 30,
        }],
    );
    let r = import_raw_tensor(&blob, RawLayout::Dada, &side).unwrap().remove(0);
    assert_eq!(r.n_objects(), 15);
    assert_eq!(r.steps(), 150);
    assert_eq!(r.t_ao, Some(120));
}

#[test]
fn channel_zero_is_the_frame_feature() {
    let dir = tempdir().unwrap();
    let blob = dir.path().join("c.bin");
    let side = dir.path().join("c.jsonl");
    let layout = RawLayout::Custom {
        steps: 2,
        channels: 3,
        d_in: 2,
    };
    // [t][c][d]: frame rows hold 1s, object 1 holds 2s, object 2 zeros.
    let vals: Vec<f32> = vec![1., 1., 2., 2., 0., 0., 1., 1., 2., 2., 0., 0.];
    fs::write(&blob, vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
    sidecar(
        &side,
        &[LabelEntry {
            id: "c".into(),
            label: 0,
            t_ao: None,
            fps: 1,
        }],
    );
    let r = import_raw_tensor(&blob, layout, &side).unwrap().remove(0);
    assert_eq!(r.frames.data(), &[1., 1., 1., 1.]);
    assert_eq!(r.objects.data(), &[2., 2., 0., 0., 2., 2., 0., 0.]);
    assert_eq!(r.mask, vec![true, false, true, false]);
}

#[test]
fn size_mismatches_are_import_errors() {
    let dir = tempdir().unwrap();
    let blob = dir.path().join("odd.bin");
    let side = dir.path().join("odd.jsonl");
    let layout = RawLayout::Custom {
        steps: 50,
        channels: 7,
        d_in: 64,
    };
    sidecar(
        &side,
        &[LabelEntry {
            id: "a".into(),
            label: 0,
            t_ao: None,
            fps: 10,
        }],
    );
    fs::write(&blob, vec![0u8; 50 * 7 * 64 * 4 + 4]).unwrap();
    assert!(matches!(
        import_raw_tensor(&blob, layout, &side),
        Err(Error::Data { .. })
    ));
    zero_blob(&blob, layout, 2);
    assert!(matches!(
        import_raw_tensor(&blob, layout, &side),
        Err(Error::Data { .. })
    ));
}

#[test]
fn generate_write_import_round_trip() {
    let dir = tempdir().unwrap();
    let blob = dir.path().join("toy.bin");
    let side = dir.path().join("toy.jsonl");
    let recs = toy_records(2, 6);
    let layout = write_raw_tensor(&blob, &side, &recs).unwrap();
    assert_eq!(layout.dims(), (50, 7, 64));
    let back = import_raw_tensor(&blob, layout, &side).unwrap();
    assert_eq!(back, recs);
}
