#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use profile_pref::evaluate::prediction_request;
use profile_pref::explore::{profile_request, ExploreConfig, ProfileSample, SampleStatus};
use profile_pref::modelgate::{MockBehavior, ModelSpec};
use profile_pref::prompts::{render_baseline_profile_prompt, render_history_lines, HistoryOrder, TemplateId};
use profile_pref::corpus::{
    build_timelines, load_interactions, make_eval_instance, AttributeTable, DatasetKind, EvalInstance, RatingMap,
    RecordLayout, UserTimeline,
};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures() -> PathBuf {
    repo_root().join("fixtures")
}

pub fn fixture_timelines() -> BTreeMap<String, UserTimeline> {
    let dir = fixtures().join("movielens");
    let movies = std::fs::read(dir.join("movies.dat")).unwrap();
    let ratings = std::fs::read(dir.join("ratings.dat")).unwrap();
    let attrs = AttributeTable::load(&movies[..], DatasetKind::MovieLens, "::").unwrap();
    let layout = RecordLayout::Delimited {
        delimiter: "::".into(),
        header: false,
    };
    let recs = load_interactions(&ratings[..], DatasetKind::MovieLens, &layout, &attrs, &RatingMap::default()).unwrap();
    build_timelines(&recs)
}

pub fn fixture_instance(user: &str, k: usize, w: usize) -> EvalInstance {
    make_eval_instance(&fixture_timelines()[user], k, w).unwrap()
}

pub const PROFILE_TEXT: &str = "Enjoys tense thrillers and old westerns; rarely warms to broad comedies";

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// `(golden file name, rendered text)` for fixture user 1, K = 10, W = 30.
pub fn golden_prompts() -> Vec<(&'static str, String)> {
    let inst = fixture_instance("1", 10, 30);
    let cfg = ExploreConfig {
        models: vec![ModelSpec::mock("gen-a", 1.0, 1024, MockBehavior::Hash)],
        samples_per_model: 10,
        temperature: 1.0,
        window_partition: Vec::new(),
        seed: 0,
    };
    let profile = ProfileSample {
        user_id: "1".into(),
        model_id: "gen-a".into(),
        sample_index: 0,
        window_w: 30,
        text: PROFILE_TEXT.into(),
        prompt_digest: String::new(),
        status: SampleStatus::Ok,
    };
    let long = render_history_lines(&inst.split.long, HistoryOrder::EarliestFirst).unwrap();
    let mut out = vec![
        ("lettinggo_profile.txt", profile_request(&inst, 0, &cfg).unwrap().prompt.text),
        (
            "lettinggo_predict_profile.txt",
            prediction_request(&inst, Some(&profile), 0).unwrap().prompt.text,
        ),
        (
            "lettinggo_predict_history_only.txt",
            prediction_request(&inst, None, 0).unwrap().prompt.text,
        ),
    ];
    for (name, id) in [
        ("kar_profile.txt", TemplateId::KarProfile),
        ("palr_profile.txt", TemplateId::PalrProfile),
        ("rlmrec_profile.txt", TemplateId::RlmrecProfile),
    ] {
        out.push((name, render_baseline_profile_prompt(id, &long).unwrap().text));
    }
    out
}
