use std::path::Path;
use std::sync::OnceLock;

use gafl::core::encoder::encode_all;
use gafl::core::eval::retrieve_topk;
use gafl::core::finetune::FinetuneInputs;
use gafl::core::selection::select;
use gafl::core::{
    encode_gaf, finetune, generate_synthetic, oracle_annotate, pretrain, Annotation, Dataset, EncoderParams,
    FinetuneConfig, Label, MaskPattern, PretrainConfig, SelectionConfig, Split, SyntheticConfig,
};
use gafl::service::{CreateSession, DatasetUpload, ErrorCode, Event, JobStatus, ServiceDefaults, Session, SessionState, Space, Store};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn synthetic_cfg() -> SyntheticConfig {
    SyntheticConfig { class_count: 2, videos_per_class: 32, persons: 6, frames: 3, dim: 8, seed: 11, ..Default::default() }
}

fn pretrain_cfg() -> PretrainConfig {
    PretrainConfig { epochs: 3, ..Default::default() }
}

fn defaults() -> ServiceDefaults {
    ServiceDefaults { pretrain: pretrain_cfg(), finetune: FinetuneConfig { epochs: 5, ..Default::default() } }
}

fn upload() -> DatasetUpload {
    DatasetUpload { id: Some("syn".into()), synthetic: Some(synthetic_cfg()), pretrain_seed: 3, ..Default::default() }
}

struct Reference {
    dataset: Dataset,
    params: EncoderParams,
}

/// The dataset and pre-trained encoder computed with the library directly.
fn reference() -> &'static Reference {
    static R: OnceLock<Reference> = OnceLock::new();
    R.get_or_init(|| {
        let mut dataset = generate_synthetic(&synthetic_cfg()).unwrap();
        dataset.id = "syn".into();
        let (params, _) = pretrain(&dataset.split(Split::Train), &pretrain_cfg(), 3).unwrap();
        Reference { dataset, params }
    })
}

/// A data directory holding the registered dataset, built once and copied.
fn seeded_root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        Store::open(dir.path(), defaults()).unwrap().add_dataset(upload()).unwrap();
        dir
    })
    .path()
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}

fn fresh_store() -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(seeded_root(), dir.path());
    let store = Store::open(dir.path(), defaults()).unwrap();
    (dir, store)
}

fn queries() -> Vec<String> {
    let ds = &reference().dataset;
    ds.entries
        .iter()
        .filter(|e| e.split == Split::Test && e.video.class_label.as_deref() == Some("r-set"))
        .take(2)
        .map(|e| e.video.id.clone())
        .collect()
}

fn session_request() -> CreateSession {
    CreateSession { dataset_id: "syn".into(), query_ids: queries(), selection_config: None }
}

fn oracle(session: &Session) -> Vec<Annotation> {
    let ids: Vec<&str> = session.selected_ids.iter().map(String::as_str).collect();
    oracle_annotate(&ids, "r-set", &reference().dataset).unwrap()
}

fn pool_of(ds: &Dataset) -> (Vec<&str>, Vec<&gafl::core::VideoFeatures>) {
    ds.entries.iter().filter(|e| e.split == Split::Train).map(|e| (e.video.id.as_str(), &e.video)).unzip()
}

#[test]
fn uploaded_dataset_matches_the_library() {
    let (_dir, store) = fresh_store();
    let state = store.dataset("syn").unwrap();
    assert_eq!(state.dataset, reference().dataset);
    assert_eq!(state.params.values(), reference().params.values());
    let info = store.dataset_info("syn").unwrap();
    assert_eq!((info.video_count, info.pool_size, info.dim), (64, 48, 8));
}

#[test]
fn selection_matches_the_library() {
    let (_dir, store) = fresh_store();
    let session = store.create_session(session_request()).unwrap();
    assert_eq!(session.state, SessionState::AwaitingAnnotations);

    let r = reference();
    let (ids, pool) = pool_of(&r.dataset);
    let gafs = encode_all(pool.iter().copied(), &r.params).unwrap();
    let qs: Vec<_> = queries().iter().map(|q| r.dataset.video(q).unwrap()).collect();
    let lib = select(&qs, &gafs, &r.params, &SelectionConfig::default()).unwrap();
    let expected: Vec<&str> = lib.selected.iter().map(|&j| ids[j]).collect();
    assert_eq!(session.selected_ids, expected);

    let view = store.selection(&session.id).unwrap();
    let extra: Vec<&str> = lib.query_aware.extra.iter().map(|&j| ids[j]).collect();
    assert_eq!(view.candidates.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), extra);
    let first = &view.candidates[0];
    let j = lib.query_aware.extra[0];
    assert_eq!(first.s, vec![lib.query_aware.scores.s.get(0, j), lib.query_aware.scores.s.get(1, j)]);
}

#[test]
fn finetune_and_retrieval_match_the_library() {
    let (_dir, store) = fresh_store();
    let session = store.create_session(session_request()).unwrap();
    let labels = oracle(&session);
    store.annotate(&session.id, labels.clone()).unwrap();
    let config = FinetuneConfig { epochs: 4, ..Default::default() };
    let ticket = store.start_finetune(&session.id, Some(config.clone())).unwrap();
    assert_eq!(store.job(&ticket.job_id).unwrap().job.status, JobStatus::Running);
    let done = store.run_job(&ticket).unwrap();
    assert_eq!(done.job.status, JobStatus::Succeeded);
    assert_eq!(store.session(&session.id).unwrap().state, SessionState::Ready);

    let r = reference();
    let qs: Vec<_> = queries().iter().map(|q| r.dataset.video(q).unwrap()).collect();
    let selected = labels.iter().map(|a| (r.dataset.video(&a.video_id).unwrap(), a.label)).collect();
    let (tuned, report) = finetune(&FinetuneInputs { queries: qs, selected }, &r.params, &config).unwrap();
    assert_eq!(store.finetuned_params(&session.id).unwrap().values(), tuned.values());
    assert_eq!(done.job.report.as_ref(), Some(&report));

    let (ids, pool) = pool_of(&r.dataset);
    for (space, params) in [(Space::Pretrained, &r.params), (Space::Finetuned, &tuned)] {
        let gafs = encode_all(pool.iter().copied(), params).unwrap();
        let q = encode_gaf(r.dataset.video(&queries()[0]).unwrap(), params, &MaskPattern::none()).unwrap();
        let lib = retrieve_topk(&q, &ids, &gafs, 7).unwrap();
        let view = store.retrieval(&session.id, &queries()[0], 7, space).unwrap();
        let got: Vec<(&str, f64)> = view.results.iter().map(|x| (x.id.as_str(), x.score)).collect();
        let want: Vec<(&str, f64)> = lib.iter().map(|x| (ids[x.index], x.score)).collect();
        assert_eq!(got, want, "{space:?}");
        assert_eq!(view.results.iter().map(|x| x.rank).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    }
}

#[test]
fn request_errors_carry_codes_fields_and_ids() {
    let (_dir, store) = fresh_store();
    let err = store.create_session(CreateSession { dataset_id: "nope".into(), ..session_request() }).unwrap_err();
    assert_eq!(err.code, ErrorCode::NotFound);

    let mut req = session_request();
    req.query_ids.push("ghost-1".into());
    req.query_ids.push("ghost-2".into());
    let err = store.create_session(req).unwrap_err();
    assert_eq!((err.code, err.ids.clone()), (ErrorCode::NotFound, vec!["ghost-1".to_string(), "ghost-2".to_string()]));

    let bad = SelectionConfig { masked_persons: 6, ..Default::default() };
    let err = store.create_session(CreateSession { selection_config: Some(bad), ..session_request() }).unwrap_err();
    assert_eq!(err.code, ErrorCode::Invalid);
    assert!(err.field.as_deref().is_some_and(|f| f.starts_with("selection_config")), "{err:?}");

    let session = store.create_session(session_request()).unwrap();
    let err = store.start_finetune(&session.id, None).unwrap_err();
    assert_eq!((err.code, err.ids.clone()), (ErrorCode::Conflict, session.selected_ids.clone()));

    let err = store.annotate(&session.id, vec![Annotation::new(queries()[0].clone(), Label::Positive)]).unwrap_err();
    assert_eq!((err.code, err.ids.clone()), (ErrorCode::Invalid, vec![queries()[0].clone()]));

    let err = store.retrieval(&session.id, &queries()[0], 3, Space::Finetuned).unwrap_err();
    assert_eq!(err.code, ErrorCode::Conflict);
    let err = store.retrieval(&session.id, &queries()[0], 49, Space::Pretrained).unwrap_err();
    assert_eq!((err.code, err.field.as_deref()), (ErrorCode::Invalid, Some("k")));
    assert!(store.retrieval(&session.id, &queries()[0], 0, Space::Pretrained).unwrap().results.is_empty());
    assert_eq!(store.retrieval(&session.id, "ghost", 3, Space::Pretrained).unwrap_err().code, ErrorCode::NotFound);

    let err = store.start_finetune(&session.id, Some(FinetuneConfig { lr: -1.0, ..Default::default() })).unwrap_err();
    assert_eq!(err.code, ErrorCode::Invalid);
    assert_eq!(store.add_dataset(upload()).unwrap_err().code, ErrorCode::Conflict);
    let err = store.add_dataset(DatasetUpload { id: Some("../x".into()), ..upload() }).unwrap_err();
    assert_eq!((err.code, err.field.as_deref()), (ErrorCode::Invalid, Some("id")));
    let err = store.add_dataset(DatasetUpload { id: Some("y".into()), ..Default::default() }).unwrap_err();
    assert_eq!(err.code, ErrorCode::Invalid);
}

#[test]
fn schematic_returns_positions() {
    let (_dir, store) = fresh_store();
    let id = &reference().dataset.entries[0].video.id;
    let s = store.schematic(id, None).unwrap();
    assert_eq!((s.frames, s.persons, s.positions.len(), s.positions[0].len()), (3, 6, 3, 6));
    assert_eq!(s.positions[1][2], reference().dataset.entries[0].video.position_at(1, 2));
    assert_eq!(store.schematic("ghost", None).unwrap_err().code, ErrorCode::NotFound);
}

#[test]
fn clone_copies_selection_and_votes() {
    let (_dir, store) = fresh_store();
    let session = store.create_session(session_request()).unwrap();
    let mut votes = oracle(&session);
    votes[0].annotator = Some("ann-1".into());
    votes.truncate(3);
    store.annotate(&session.id, votes).unwrap();
    let copy = store.clone_session(&session.id).unwrap();
    let original = store.session(&session.id).unwrap();
    assert_ne!(copy.id, original.id);
    assert_eq!(copy.cloned_from.as_deref(), Some(original.id.as_str()));
    assert_eq!((copy.state, &copy.selected_ids, &copy.votes, &copy.missing), (SessionState::AwaitingAnnotations, &original.selected_ids, &original.votes, &original.missing));
}

#[test]
fn running_job_is_failed_after_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(seeded_root(), dir.path());
    let (sid, job_id) = {
        let store = Store::open(dir.path(), defaults()).unwrap();
        let session = store.create_session(session_request()).unwrap();
        store.annotate(&session.id, oracle(&session)).unwrap();
        let ticket = store.start_finetune(&session.id, None).unwrap();
        (session.id, ticket.job_id)
    };
    let store = Store::open(dir.path(), defaults()).unwrap();
    let session = store.session(&sid).unwrap();
    assert_eq!(session.state, SessionState::Failed);
    let job = store.job(&job_id).unwrap().job;
    assert_eq!(job.status, JobStatus::Failed);
    assert!(job.error.unwrap().contains("restart"));
    let next = store.create_session(session_request()).unwrap();
    assert_ne!(next.id, sid);
}

#[test]
fn finetuned_space_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(seeded_root(), dir.path());
    let (sid, before) = {
        let store = Store::open(dir.path(), defaults()).unwrap();
        let session = store.create_session(session_request()).unwrap();
        store.annotate(&session.id, oracle(&session)).unwrap();
        store.run_job(&store.start_finetune(&session.id, None).unwrap()).unwrap();
        (session.id.clone(), store.retrieval(&session.id, &queries()[1], 5, Space::Finetuned).unwrap())
    };
    let store = Store::open(dir.path(), defaults()).unwrap();
    assert_eq!(store.retrieval(&sid, &queries()[1], 5, Space::Finetuned).unwrap(), before);
}

#[derive(Debug, Clone)]
enum Op {
    Annotate(Vec<(usize, bool, u8)>),
    AnnotateForeign,
    Finetune,
    RunJob,
    Clone,
    Restart,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => prop::collection::vec((0usize..5, any::<bool>(), 0u8..3), 0..6).prop_map(Op::Annotate),
        1 => Just(Op::AnnotateForeign),
        2 => Just(Op::Finetune),
        2 => Just(Op::RunJob),
        1 => Just(Op::Clone),
        2 => Just(Op::Restart),
    ]
}

fn snapshot(store: &Store) -> Vec<String> {
    store.session_ids().iter().map(|id| serde_json::to_string(&store.session(id).unwrap()).unwrap()).collect()
}

/// The sessions as a restart should bring them back: running jobs failed.
fn after_restart(store: &Store) -> Vec<String> {
    store
        .session_ids()
        .iter()
        .map(|id| {
            let mut s = store.session(id).unwrap();
            if s.state == SessionState::Finetuning {
                let job_id = s.current_job().unwrap().job_id.clone();
                s.apply(&Event::FinetuneFailed { job_id, error: "interrupted by a service restart".into() }).unwrap();
            }
            serde_json::to_string(&s).unwrap()
        })
        .collect()
}

/// Random call sequences against a simple model of the state machine. After
/// every restart the replayed sessions must serialize identically, except
/// that running jobs turn into failed ones.
#[test]
fn random_call_sequences_follow_the_state_machine() {
    let mut runner = TestRunner::new(Config { cases: 200, failure_persistence: None, ..Config::default() });
    runner
        .run(&prop::collection::vec(op_strategy(), 1..12), |ops| {
            let dir = tempfile::tempdir().unwrap();
            copy_dir(seeded_root(), dir.path());
            let mut store = Store::open(dir.path(), defaults()).unwrap();
            let first = store.create_session(session_request()).unwrap();
            let mut current = first.id.clone();
            let mut labelled = std::collections::BTreeSet::new();
            let mut state = SessionState::AwaitingAnnotations;
            let mut ticket = None;
            for op in ops {
                let selected = store.session(&current).unwrap().selected_ids;
                match op {
                    Op::Annotate(votes) => {
                        let anns: Vec<Annotation> = votes
                            .iter()
                            .map(|&(k, pos, who)| Annotation {
                                annotator: Some(format!("a{who}")),
                                ..Annotation::new(selected[k].clone(), if pos { Label::Positive } else { Label::Negative })
                            })
                            .collect();
                        let res = store.annotate(&current, anns);
                        prop_assert_eq!(res.is_ok(), state == SessionState::AwaitingAnnotations);
                        match res {
                            Ok(_) => labelled.extend(votes.iter().map(|v| v.0)),
                            Err(e) => prop_assert_eq!(e.code, ErrorCode::Conflict),
                        }
                    }
                    Op::AnnotateForeign => {
                        let err = store.annotate(&current, vec![Annotation::new("ghost", Label::Positive)]).unwrap_err();
                        let code = if state == SessionState::AwaitingAnnotations { ErrorCode::Invalid } else { ErrorCode::Conflict };
                        prop_assert_eq!(err.code, code);
                    }
                    Op::Finetune => {
                        let res = store.start_finetune(&current, None);
                        let ok = state == SessionState::AwaitingAnnotations && labelled.len() == selected.len();
                        prop_assert_eq!(res.is_ok(), ok, "{:?}", res);
                        if let Ok(t) = res {
                            state = SessionState::Finetuning;
                            ticket = Some(t);
                        }
                    }
                    Op::RunJob => {
                        if let Some(t) = ticket.take() {
                            let view = store.run_job(&t).unwrap();
                            prop_assert_eq!(view.job.status, JobStatus::Succeeded);
                            state = SessionState::Ready;
                        }
                    }
                    Op::Clone => {
                        let copy = store.clone_session(&current).unwrap();
                        prop_assert_eq!(copy.missing.len(), selected.len() - labelled.len());
                        current = copy.id;
                        state = SessionState::AwaitingAnnotations;
                        ticket = None;
                    }
                    Op::Restart => {
                        let expected = after_restart(&store);
                        drop(store);
                        store = Store::open(dir.path(), defaults()).unwrap();
                        prop_assert_eq!(snapshot(&store), expected);
                        if state == SessionState::Finetuning {
                            state = SessionState::Failed;
                            ticket = None;
                        }
                    }
                }
                prop_assert_eq!(store.session(&current).unwrap().state, state);
            }
            Ok(())
        })
        .unwrap();
}
