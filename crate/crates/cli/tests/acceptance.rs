//! Acceptance: offline end-to-end run of `generate` followed by `bench`
//! with the nearest-neighbor backend and the trigram embedder; no
//! network access is possible because no endpoint is configured.

use std::process::Command;
use std::time::Instant;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_comfyflow"));
    cmd.env_clear();
    cmd
}

const SUBJECTS: [&str; 20] = [
    "a mountain lake at dawn",
    "a portrait of an astronaut",
    "a bowl of ramen on a wooden table",
    "a cyberpunk alleyway in the rain",
    "a watercolor fox in a forest",
    "an isometric castle on a cliff",
    "a macro photo of a dew drop",
    "a retro sports car at sunset",
    "a cozy reading nook with plants",
    "a dragon curled around a tower",
    "a snowy village at night",
    "a jazz band of robots",
    "a coral reef teeming with fish",
    "a paper-craft hot air balloon",
    "a desert caravan under two moons",
    "a lighthouse in a storm",
    "a stained-glass hummingbird",
    "a steampunk pocket watch",
    "a field of lavender at golden hour",
    "a origami crane on a window sill",
];

fn corpus_line(i: usize, description: &str) -> String {
    // Chains of varying depth over three node types.
    let diagram = match i % 3 {
        0 => r#"[["Src_0","out","Sink_0","a"]]"#.to_string(),
        1 => r#"[["Src_0","out","Mid_0","a"],["Mid_0","out","Sink_0","a"]]"#.to_string(),
        _ => concat!(
            r#"[["Src_0","out","Mid_0","a"],["Mid_0","out","Mid_1","a"],"#,
            r#"["Mid_1","out","Sink_0","a"]]"#
        )
        .to_string(),
    };
    format!(r#"{{"description": "render {description}", "diagram": {diagram}}}"#)
}

#[test]
fn criterion_10_offline_end_to_end() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);

    let nodebase = r#"[
      {"node_name": "Src", "input_names": [], "output_names": ["out"], "output_types": ["SIG"]},
      {"node_name": "Mid", "input_names": ["a"], "input_types": ["SIG"],
       "output_names": ["out"], "output_types": ["SIG"]},
      {"node_name": "Sink", "input_names": ["a"], "input_types": ["SIG"], "output_names": []}
    ]"#;
    std::fs::write(path("nodebase.json"), nodebase).unwrap();

    let corpus: Vec<String> = SUBJECTS
        .iter()
        .enumerate()
        .map(|(i, s)| corpus_line(i, s))
        .collect();
    std::fs::write(path("corpus.jsonl"), corpus.join("\n")).unwrap();

    let categories = [
        "Text-to-Image Generation",
        "Image Editing",
        "Style Transfer",
        "3D Generation",
        "Video Editing or Generation",
        "Others",
    ];
    let dataset: Vec<String> = SUBJECTS
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let category = categories[i % categories.len()];
            let subcategory = if category == "Image Editing" {
                r#", "subcategory": "Face Swap""#
            } else {
                ""
            };
            format!(
                r#"{{"description": "render {s}", "category": "{category}"{subcategory}}}"#
            )
        })
        .collect();
    std::fs::write(path("dataset.jsonl"), dataset.join("\n")).unwrap();

    // Generate one diagram with the echo description.
    let output = bin()
        .arg("generate")
        .args(["--desc", &format!("render {}", SUBJECTS[1]), "--backend", "nn"])
        .arg("--fewshot")
        .arg(path("corpus.jsonl"))
        .arg("--out")
        .arg(path("generated.json"))
        .env("COMFYFLOW_NODEBASE_PATH", path("nodebase.json"))
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "generate failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert_eq!(
        std::fs::read_to_string(path("generated.json")).unwrap(),
        r#"[["Src_0","out","Mid_0","a"],["Mid_0","out","Sink_0","a"]]"#
    );

    // Bench the same backend over the echo dataset.
    let output = bin()
        .arg("bench")
        .arg("--dataset")
        .arg(path("dataset.jsonl"))
        .args(["--backend", "nn"])
        .arg("--fewshot")
        .arg(path("corpus.jsonl"))
        .arg("--out")
        .arg(path("report.json"))
        .env("COMFYFLOW_NODEBASE_PATH", path("nodebase.json"))
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "bench failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path("report.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 20);
    assert_eq!(report["fv"], 1.0);
    assert_eq!(report["pa"], 1.0);
    assert_eq!(report["pia"], serde_json::Value::Null);
    assert_eq!(report["pnd"], 3);
    assert_eq!(report["fv_pct"], "100.0");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "acceptance: 10 offline end-to-end (nn backend, fv=pa=1.0, {:.2}s, no network) ... PASS",
        elapsed.as_secs_f64()
    );
}
