mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tessellate::cli::write_raw;
use tessellate::{
    ArrayMetadata, ChunkedArray, CurationReport, DenseTensor, PatchPlan, TensorLayout,
};

use common::oracle_placements;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn tessellate(args: &[&str], cwd: &Path) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_tessellate"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let run = tessellate(args, cwd);
    assert_eq!(
        run.code, 0,
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        run.stdout, run.stderr
    );
    run.stdout
}

fn random_volume(dir: &Path, name: &str, layout: &TensorLayout, seed: u64) -> DenseTensor {
    let mut rng = StdRng::seed_from_u64(seed);
    let values: Vec<f32> = (0..layout.len()).map(|_| rng.gen()).collect();
    write_raw(&dir.join(name), layout, &values).unwrap();
    DenseTensor::new(layout.clone(), values).unwrap()
}

#[test]
fn plan_and_info() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    random_volume(
        d,
        "v.f32",
        &TensorLayout::new(1, 2, vec![20, 30, 25]).unwrap(),
        1,
    );
    let out = ok(
        &[
            "plan",
            "v.f32",
            "--window",
            "10",
            "--step",
            "6,6,5",
            "--out",
            "plan.json",
        ],
        d,
    );
    assert!(out.contains("placements     60"), "{out}");
    let plan = PatchPlan::load(&d.join("plan.json")).unwrap();
    assert_eq!(
        plan.len(),
        oracle_placements(1, &[20, 30, 25], &[10; 3], &[6, 6, 5]).len()
    );

    let info = ok(&["info", "plan.json"], d);
    assert!(
        info.contains("placements     60") && info.contains("(6, 6, 5)"),
        "{info}"
    );
    let info = ok(&["info", "v.f32"], d);
    assert!(info.contains("(1, 2, 20, 30, 25)"), "{info}");

    fs::create_dir(d.join("empty")).unwrap();
    let run = tessellate(&["info", "empty"], d);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains("unrecognized"), "{}", run.stderr);
}

#[test]
fn validation_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    random_volume(
        d,
        "v.f32",
        &TensorLayout::new(1, 1, vec![16, 16]).unwrap(),
        2,
    );
    let run = tessellate(
        &[
            "plan", "v.f32", "--window", "8", "--step", "9", "--out", "p.json",
        ],
        d,
    );
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert!(!d.join("p.json").exists());

    let run = tessellate(
        &[
            "roundtrip",
            "v.f32",
            "--window",
            "8",
            "--step",
            "9",
            "--out",
            "rt",
        ],
        d,
    );
    assert_eq!(run.code, 2);
    assert!(!d.join("rt").exists());

    let run = tessellate(
        &[
            "plan",
            "v.f32",
            "--window",
            "8",
            "--on-zero-coverage",
            "sometimes",
            "--out",
            "p.json",
        ],
        d,
    );
    assert_eq!(run.code, 2);

    let run = tessellate(
        &["plan", "missing.f32", "--window", "8", "--out", "p.json"],
        d,
    );
    assert_eq!(run.code, 3);
}

#[test]
fn subsample_with_sparse_labels_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let layout = TensorLayout::new(1, 1, vec![32, 32, 32]).unwrap();
    random_volume(d, "v.f32", &layout, 3);
    let (block, size) = ([9usize, 14, 20], 5usize);
    let inside = |i: &[usize]| (0..3).all(|a| (block[a]..block[a] + size).contains(&i[a + 2]));
    let labels = DenseTensor::from_fn(layout.clone(), |i| if inside(i) { 2.0 } else { -1.0 });
    write_raw(&d.join("l.f32"), &layout, labels.values()).unwrap();

    ok(
        &[
            "plan",
            "v.f32",
            "--window",
            "16",
            "--step",
            "8",
            "--out",
            "plan.json",
        ],
        d,
    );
    let out = ok(
        &[
            "subsample",
            "v.f32",
            "--plan",
            "plan.json",
            "--labels",
            "l.f32",
            "--out",
            "sub",
        ],
        d,
    );
    assert!(out.contains("total patches  27"), "{out}");

    let placements = oracle_placements(1, &[32; 3], &[16; 3], &[8; 3]);
    let retained: Vec<usize> = (0..placements.len())
        .filter(|&i| {
            (0..3)
                .all(|a| placements[i].1[a] < block[a] + size && block[a] < placements[i].1[a] + 16)
        })
        .collect();
    let mut occurrences = 0u64;
    for v in 0..size * size * size {
        let voxel = [block[0] + v / 25, block[1] + v / 5 % 5, block[2] + v % 5];
        occurrences += retained
            .iter()
            .filter(|&&i| {
                (0..3).all(|a| (placements[i].1[a]..placements[i].1[a] + 16).contains(&voxel[a]))
            })
            .count() as u64;
    }
    let report =
        CurationReport::from_json(&fs::read_to_string(d.join("sub/report.json")).unwrap()).unwrap();
    assert_eq!(report.total_patches, 27);
    assert_eq!(report.retained_indices, retained);
    assert_eq!(report.annotated_voxels_unique, 125);
    assert_eq!(report.duplication_rate, Some(occurrences as f64 / 125.0));

    let data = ChunkedArray::open(d.join("sub/data")).unwrap();
    let kept = ChunkedArray::open(d.join("sub/labels")).unwrap();
    assert_eq!(data.shape(), &[retained.len(), 1, 16, 16, 16]);
    assert_eq!(kept.shape(), data.shape());

    let again = tessellate(
        &[
            "subsample",
            "v.f32",
            "--plan",
            "plan.json",
            "--labels",
            "l.f32",
            "--out",
            "sub",
        ],
        d,
    );
    assert_eq!(again.code, 3, "existing output must not be overwritten");

    let plan_mismatch = tessellate(
        &["subsample", "l.f32", "--plan", "plan.json", "--out", "x"],
        d,
    );
    assert_eq!(plan_mismatch.code, 0, "labels share the data layout here");
    let small = TensorLayout::new(1, 1, vec![32, 32, 30]).unwrap();
    write_raw(&d.join("bad.f32"), &small, &vec![-1.0; small.len()]).unwrap();
    let run = tessellate(
        &[
            "subsample",
            "v.f32",
            "--plan",
            "plan.json",
            "--labels",
            "bad.f32",
            "--out",
            "y",
        ],
        d,
    );
    assert_eq!(run.code, 2, "{}", run.stderr);
}

#[test]
fn subsample_without_labels_writes_every_patch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    random_volume(
        d,
        "v.f32",
        &TensorLayout::new(2, 1, vec![12, 20]).unwrap(),
        4,
    );
    ok(
        &[
            "plan",
            "v.f32",
            "--window",
            "8",
            "--step",
            "4",
            "--out",
            "plan.json",
        ],
        d,
    );
    ok(
        &["subsample", "v.f32", "--plan", "plan.json", "--out", "sub"],
        d,
    );
    let m = oracle_placements(2, &[12, 20], &[8, 8], &[4, 4]).len();
    assert_eq!(
        ChunkedArray::open(d.join("sub/data")).unwrap().shape(),
        &[m, 1, 8, 8]
    );
    assert!(!d.join("sub/report.json").exists());
    assert!(!d.join("sub/labels").exists());
}

#[test]
fn stitch_identity_results_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let layout = TensorLayout::new(1, 2, vec![18, 22, 14]).unwrap();
    let input = random_volume(d, "v.f32", &layout, 5);
    ok(
        &[
            "plan",
            "v.f32",
            "--window",
            "8",
            "--step",
            "6",
            "--border",
            "1",
            "--border-weight",
            "0.3",
            "--out",
            "plan.json",
        ],
        d,
    );
    ok(
        &["subsample", "v.f32", "--plan", "plan.json", "--out", "sub"],
        d,
    );
    let out = ok(
        &[
            "stitch",
            "sub/data",
            "--plan",
            "plan.json",
            "--out",
            "st",
            "--workers",
            "3",
            "--chunk",
            "5,7,4",
        ],
        d,
    );
    assert!(out.contains("0 uncovered"), "{out}");
    let got = ChunkedArray::open(d.join("st/output"))
        .unwrap()
        .read_all()
        .unwrap();
    for (a, b) in got.iter().zip(input.values()) {
        assert!((a - b).abs() <= 1e-6);
    }

    // A results store holding only the first patches is incomplete; resuming
    // with the full store finishes the run.
    let plan = PatchPlan::load(&d.join("plan.json")).unwrap();
    let full = ChunkedArray::open(d.join("sub/data")).unwrap();
    let partial = ChunkedArray::create(
        d.join("partial"),
        ArrayMetadata::new(vec![5, 2, 8, 8, 8], vec![1, 2, 8, 8, 8]).unwrap(),
    )
    .unwrap();
    partial
        .write_region(
            &[0; 5],
            &[5, 2, 8, 8, 8],
            &full.read_region(&[0; 5], &[5, 2, 8, 8, 8]).unwrap(),
        )
        .unwrap();
    let run = tessellate(
        &["stitch", "partial", "--plan", "plan.json", "--out", "st2"],
        d,
    );
    assert_eq!(run.code, 5, "{}", run.stderr);
    let out = ok(
        &[
            "stitch",
            "sub/data",
            "--plan",
            "plan.json",
            "--out",
            "st2",
            "--resume",
        ],
        d,
    );
    assert!(
        out.contains(&format!("{} accumulated (5 resumed)", plan.len())),
        "{out}"
    );
    let resumed = ChunkedArray::open(d.join("st2/output"))
        .unwrap()
        .read_all()
        .unwrap();
    for (a, b) in resumed.iter().zip(input.values()) {
        assert!((a - b).abs() <= 1e-6);
    }

    let run = tessellate(
        &["stitch", "sub/data", "--plan", "plan.json", "--out", "st"],
        d,
    );
    assert_eq!(run.code, 3, "finished runs are not overwritten");
}

#[test]
fn roundtrip_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let store = ChunkedArray::create(
        d.join("in.zarr"),
        ArrayMetadata::new(vec![1, 2, 30, 26, 21], vec![1, 1, 7, 9, 10]).unwrap(),
    )
    .unwrap();
    let mut rng = StdRng::seed_from_u64(6);
    let values: Vec<f32> = (0..2 * 30 * 26 * 21).map(|_| rng.gen()).collect();
    store
        .write_region(&[0; 5], &[1, 2, 30, 26, 21], &values)
        .unwrap();

    let out = ok(
        &[
            "roundtrip",
            "in.zarr",
            "--window",
            "12,12,10",
            "--step",
            "8",
            "--border",
            "2",
            "--border-weight",
            "0.5",
        ],
        d,
    );
    assert!(out.contains("PASS"), "{out}");
    let out = ok(
        &[
            "roundtrip",
            "in.zarr",
            "--window",
            "12",
            "--step",
            "8",
            "--border",
            "2",
            "--border-weight",
            "0",
        ],
        d,
    );
    assert!(out.contains("PASS"), "{out}");

    for run in ["a", "b"] {
        ok(
            &[
                "roundtrip",
                "in.zarr",
                "--window",
                "12",
                "--step",
                "7",
                "--border",
                "2",
                "--border-weight",
                "0.25",
                "--out",
                run,
            ],
            d,
        );
    }
    let output = |run: &str| {
        let root = d.join(run).join("stitch/output");
        let mut files: Vec<_> = fs::read_dir(&root)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    assert_eq!(output("a"), output("b"));

    let run = tessellate(
        &["roundtrip", "in.zarr", "--window", "12", "--step", "13"],
        d,
    );
    assert_eq!(run.code, 2);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    random_volume(
        d,
        "v.f32",
        &TensorLayout::new(1, 1, vec![40, 24]).unwrap(),
        7,
    );
    fs::write(
        d.join("run.toml"),
        "input = \"v.f32\"\nout = \"plan.json\"\nwindow = [16, 8]\nstep = 8\nborder = 2\nborder_weight = 0.5\n",
    )
    .unwrap();
    ok(&["plan", "--config", "run.toml"], d);
    let plan = PatchPlan::load(&d.join("plan.json")).unwrap();
    assert_eq!(plan.spec().step(), &[8, 8]);
    ok(
        &[
            "plan",
            "--config",
            "run.toml",
            "--step",
            "4",
            "--out",
            "plan4.json",
        ],
        d,
    );
    let plan = PatchPlan::load(&d.join("plan4.json")).unwrap();
    assert_eq!(plan.spec().step(), &[4, 4]);
    assert_eq!(plan.spec().window(), &[16, 8]);

    fs::write(d.join("bad.json"), r#"{"window": 8, "strides": 4}"#).unwrap();
    let run = tessellate(
        &["plan", "v.f32", "--config", "bad.json", "--out", "p.json"],
        d,
    );
    assert_eq!(run.code, 3);
}
