use std::fs;
use std::path::Path;

use bindattn_cli::{cmd_analyze, cmd_masks, cmd_render, cmd_search, run, Cli, CliError};
use bindattn_core::imageio::decode_ppm;
use bindattn_core::maskgen::{parse_bindmask, MaskDumpKind};
use clap::Parser;

const SCENE: &str = r#"{"grid":{"h":2,"w":2},"global_tags":["garden"],"seed":7,"instances":[
    {"id":"A","tags":["red"],"region":{"bbox":[0,0,0,1]}},
    {"id":"B","tags":["blue"],"region":{"bbox":[1,0,1,1]}}]}"#;

fn parse(dir: &Path, args: &[&str]) -> Cli {
    let scene = dir.join("scene.json");
    if !scene.exists() {
        fs::write(&scene, SCENE).unwrap();
    }
    let mut argv = vec!["bindattn".to_string(), args[0].to_string(), scene.display().to_string()];
    argv.extend(args[1..].iter().map(|s| s.to_string()));
    Cli::try_parse_from(argv).unwrap()
}

#[test]
fn render_writes_a_decodable_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let cli =
        parse(dir.path(), &["render", "--layers", "3", "--steps", "2", "--cell-px", "4", "-o", out.to_str().unwrap()]);
    let manifest = run(&cli).unwrap();
    assert_eq!(manifest.outputs[0].path, "render.ppm");
    let img = decode_ppm(&fs::read(out.join("render.ppm")).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (8, 8));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn masks_round_trip_through_the_dump_format() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let cli = parse(dir.path(), &["masks", "--layers", "3", "--schedule", "SHS", "-o", out.to_str().unwrap()]);
    let bindattn_cli::Command::Masks(args) = &cli.command else { unreachable!() };
    let manifest = cmd_masks(args).unwrap();
    assert_eq!(manifest.outputs.len(), 7);
    let (kind, mask) = parse_bindmask(&fs::read_to_string(out.join("layer_001.txt")).unwrap()).unwrap();
    assert_eq!(kind, MaskDumpKind::Layer { layer: 1, mode: bindattn_core::BindingMode::HardImage });
    assert_eq!(mask.allowed_keys(6), vec![2, 3, 6, 7]);
    let (kind, _) = parse_bindmask(&fs::read_to_string(out.join("reach.txt")).unwrap()).unwrap();
    assert_eq!(kind, MaskDumpKind::Reach);
}

#[test]
fn search_and_analyze_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s");
    let cli = parse(
        dir.path(),
        &["search", "--weights", "routing", "--routing-layer", "3", "--layers", "6", "-o", s.to_str().unwrap()],
    );
    let bindattn_cli::Command::Search(args) = &cli.command else { unreachable!() };
    cmd_search(args).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("search.json")).unwrap()).unwrap();
    assert_eq!(report["entries"].as_array().unwrap().len(), 6);
    assert!(report["entries"][3]["delta"].as_f64().unwrap() > 0.0);

    let a = dir.path().join("a");
    let cli = parse(dir.path(), &["analyze", "--weights", "routing", "--arm", "naive", "-o", a.to_str().unwrap()]);
    let bindattn_cli::Command::Analyze(args) = &cli.command else { unreachable!() };
    cmd_analyze(args).unwrap();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("leakage.json")).unwrap()).unwrap();
    assert_eq!(report["F"]["A"], 1.0);
    assert_eq!(report["flags"][0], "no-bridge-layout");
}

#[test]
fn bad_inputs_map_to_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("scene.json"),
        r#"{"grid":{"h":2,"w":2},"seed":1,"instances":[{"id":"A","tags":["x"],"region":{"bbox":[0,0,5,5]}}]}"#,
    )
    .unwrap();
    let cli = parse(dir.path(), &["render", "-o", dir.path().join("o").to_str().unwrap()]);
    let bindattn_cli::Command::Render(args) = &cli.command else { unreachable!() };
    let err = cmd_render(args).unwrap_err();
    assert!(matches!(err, CliError::Input(_)));
    assert_eq!(err.exit_code(), 2);

    for bad in [["--hard-range", "0.2"], ["--schedule", "HS"], ["--dim", "8"]] {
        let mut argv = vec!["render"];
        argv.extend(bad);
        let cli = parse(dir.path(), &argv);
        assert_eq!(run(&cli).unwrap_err().exit_code(), 2, "{bad:?}");
    }
    let missing = Cli::try_parse_from(["bindattn", "render", "/nonexistent/scene.json"]).unwrap();
    assert_eq!(run(&missing).unwrap_err().exit_code(), 2);
}

#[test]
fn divergence_maps_to_exit_code_three() {
    let err: CliError = bindattn_core::Error::NumericalDivergence { step: 2 }.into();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn optional_dumps_land_where_asked() {
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("dump");
    let weights = dir.path().join("w.bin");
    let cli = parse(
        dir.path(),
        &[
            "render",
            "--layers",
            "2",
            "--steps",
            "1",
            "--dump-masks",
            masks.to_str().unwrap(),
            "--save-weights",
            weights.to_str().unwrap(),
            "-o",
            dir.path().join("o").to_str().unwrap(),
        ],
    );
    run(&cli).unwrap();
    assert!(masks.join("layer_001.pgm").exists());
    let w = bindattn_core::ModelWeights::read_snapshot(fs::File::open(&weights).unwrap()).unwrap();
    assert_eq!(w.num_layers(), 2);
}
