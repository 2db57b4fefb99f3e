use std::fs;
use std::path::Path;

use dcles::filters::FilterKind;
use dcles::operators::relative_divergence;
use dcles::pipeline::{generate_dataset, load_field, load_trajectories, split_dataset, trajectory_dir, DatasetConfig, Manifest, Split};
use dcles::Error;

fn tiny() -> DatasetConfig {
    DatasetConfig {
        dns_n: 32,
        reynolds: 500.0,
        seeds: vec![3, 4, 5, 6],
        t_burn: 0.02,
        t_end: 0.05,
        dt: 2.5e-3,
        stride: 4,
        coarse: vec![8, 16],
        filters: vec![FilterKind::Fa, FilterKind::Va],
        splits: [2, 1, 1],
        ..Default::default()
    }
}

fn generated() -> (tempfile::TempDir, Manifest) {
    let t = tempfile::tempdir().unwrap();
    let m = generate_dataset(&tiny(), &t.path().join("ds")).unwrap();
    (t, m)
}

#[test]
fn manifest_is_complete_and_consistent() {
    let (t, m) = generated();
    let dir = t.path().join("ds");
    let cfg = tiny();
    let (steps, dt) = cfg.recording_steps();
    assert_eq!(steps, 12);
    assert_eq!(m.snapshot_dt, m.dns_dt * cfg.stride as f64);
    assert_eq!(m.dns_dt, dt);
    assert_eq!(m.trajectories.len(), 4);
    for tr in &m.trajectories {
        let steps_seen: Vec<usize> = tr.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps_seen, vec![0, 4, 8, 12]);
        for s in &tr.snapshots {
            // every (grid, filter) pair promised by the config
            assert_eq!(s.fields.len(), 4);
            for f in &s.fields {
                assert!(dir.join(&f.ubar.path).is_file());
                assert!(dir.join(&f.commutator.path).is_file());
            }
        }
        assert!(trajectory_dir(&dir, tr.id).is_dir());
    }
    m.verify(&dir).unwrap();
    assert_eq!(Manifest::load(&dir).unwrap(), m);
}

#[test]
fn splits_are_disjoint_and_reloadable() {
    let (t, m) = generated();
    let dir = t.path().join("ds");
    let ids = |s| m.split_ids(s);
    let (a, b, c) = (ids(Split::Train), ids(Split::Valid), ids(Split::Test));
    assert_eq!((a.len(), b.len(), c.len()), (2, 1, 1));
    let mut all = [a, b, c].concat();
    all.sort();
    assert_eq!(all, vec![0, 1, 2, 3]);

    let again = split_dataset(&m, [2, 1, 1], tiny().split_seed).unwrap();
    assert_eq!(again, m);

    let train = load_trajectories(&m, &dir, Split::Train, 16, FilterKind::Fa).unwrap();
    assert_eq!(train.len(), 2);
    for tr in &train {
        assert_eq!(tr.ubar.len(), 4);
        assert_eq!(tr.dt, m.snapshot_dt);
        assert!(tr.ubar.iter().all(|u| relative_divergence(u) < 1e-10));
        for w in tr.times.windows(2) {
            assert!((w[1] - w[0] - tr.dt).abs() < 1e-12);
        }
    }
}

fn corrupt(path: &Path) {
    let mut bytes = fs::read(path).unwrap();
    let k = bytes.len() - 3;
    bytes[k] ^= 0x40;
    fs::write(path, bytes).unwrap();
}

#[test]
fn corrupted_file_fails_checksum() {
    let (t, m) = generated();
    let dir = t.path().join("ds");
    let f = &m.trajectories[m.split_ids(Split::Test)[0]].snapshots[2].fields[0];
    corrupt(&dir.join(&f.ubar.path));
    assert!(matches!(m.verify(&dir), Err(Error::Checksum { .. })));
    assert!(matches!(load_trajectories(&m, &dir, Split::Test, f.coarse, f.filter), Err(Error::Checksum { .. })));
    // the file itself still decodes, the manifest is what catches it
    assert!(load_field(&dir.join(&f.ubar.path)).is_ok());
}

#[test]
fn occupied_output_is_left_alone() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("notes.txt"), "keep").unwrap();
    assert!(generate_dataset(&tiny(), t.path()).is_err());
    assert_eq!(fs::read_to_string(t.path().join("notes.txt")).unwrap(), "keep");
    assert_eq!(fs::read_dir(t.path()).unwrap().count(), 1);
}

#[test]
fn generation_is_deterministic() {
    let (_t1, a) = generated();
    let (_t2, b) = generated();
    assert_eq!(a, b);
}

#[test]
fn zero_stride_keeps_only_the_last_snapshot() {
    let t = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { stride: 0, seeds: vec![1, 2, 3], splits: [1, 1, 1], ..tiny() };
    let m = generate_dataset(&cfg, &t.path().join("ds")).unwrap();
    for tr in &m.trajectories {
        assert_eq!(tr.snapshots.len(), 1);
        assert_eq!(tr.snapshots[0].step, 12);
    }
}
