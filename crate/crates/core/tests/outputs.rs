use kinchaos::harness::{parse_config, run_experiment, ExperimentConfig, Recipe};

fn headers(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let rep = run_experiment(cfg).unwrap();
    rep.tables
        .iter()
        .map(|t| (rep.csv_name(t), t.to_csv().lines().next().unwrap_or_default().to_string()))
        .collect()
}

#[test]
fn csv_headers_are_stable() {
    let mut erg = ExperimentConfig::baseline(Recipe::Ergodicity);
    erg.numerics.n = 8;
    erg.numerics.t_final = 2.0;
    erg.numerics.replicas = 2;
    assert_eq!(headers(&erg), [("ergodicity_w2.csv".to_string(), "t,w2_mean,w2_se,floor".to_string())]);

    let mut conc = ExperimentConfig::baseline(Recipe::Concentration);
    conc.numerics.n_list = vec![8, 16, 32, 80];
    conc.numerics.mc_reps = 4;
    let h = headers(&conc);
    assert_eq!(h.len(), 1);
    assert!(h[0].1.starts_with("k,N,"), "{h:?}");

    let h = headers(&ExperimentConfig::baseline(Recipe::ConstantsTable));
    assert_eq!(h[0].1, "theorem,quantity,value");
    let h = headers(&ExperimentConfig::baseline(Recipe::Assumptions));
    assert_eq!(h[0].1, "id,verdict,measured,bound,detail");
}

#[test]
fn report_files_land_in_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let rep = run_experiment(&ExperimentConfig::baseline(Recipe::ConstantsTable)).unwrap();
    let files = rep.write(dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("constants_table_report.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], rep.seed);
    assert!(json["verdicts"].as_array().is_some());
}

#[test]
fn echoed_config_parses_back() {
    for r in Recipe::ALL {
        let cfg = ExperimentConfig::baseline(r);
        let back = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
    }
}
