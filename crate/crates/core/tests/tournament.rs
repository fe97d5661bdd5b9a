use pdesynth_core::analysis::{run_analysis, ModelChoice};
use pdesynth_core::desk::{DeskBackend, DESK_MODEL};
use pdesynth_core::domain::{PdeTask, TaskId};
use pdesynth_core::genesis::{generate_candidates, SolverCandidate};
use pdesynth_core::harness::{Diagnostics, ExecStatus};
use pdesynth_core::llm::{Gateway, Purpose};
use pdesynth_core::metrics::{FeedbackKind, FeedbackRecord, FeedbackType};
use pdesynth_core::prompts::PromptSet;
use pdesynth_core::report::render_report;
use pdesynth_core::tournament::{
    run_synthesis, Evaluation, Evaluator, RunControl, TournamentConfig, TournamentError, TournamentState, TournamentStore,
};
use proptest::prelude::*;

fn pool(n: usize) -> (Vec<SolverCandidate>, Gateway) {
    let task = PdeTask::registry_get(TaskId::ReactionDiffusion, None).unwrap();
    let mut gw = Gateway::new(Box::new(DeskBackend::new(task.task_id())));
    let prompts = PromptSet::builtin();
    let model = ModelChoice::new(DESK_MODEL);
    let report = run_analysis(&task, &mut gw, &prompts, &model, None).unwrap();
    let pool = generate_candidates(&report, &task, n, &mut gw, &prompts, &model).unwrap().candidates;
    (pool, gw)
}

fn config(kind: FeedbackKind, rounds: u32, cycles: u32) -> TournamentConfig {
    TournamentConfig {
        judges: vec![ModelChoice::new(DESK_MODEL); 3],
        max_rounds_per_cycle: rounds,
        max_cycles: cycles,
        feedback: FeedbackType::new(kind),
        ..TournamentConfig::default()
    }
}

/// Scores come from a closure of the call index; `None` means no accuracy feedback.
struct Scripted<F: FnMut(u32) -> Option<f64>> {
    calls: u32,
    score: F,
}

impl<F: FnMut(u32) -> Option<f64>> Evaluator for Scripted<F> {
    fn evaluate(&mut self, candidate: &SolverCandidate, _: &mut Gateway) -> Result<Evaluation, TournamentError> {
        let score = (self.score)(self.calls);
        self.calls += 1;
        Ok(Evaluation {
            candidate: candidate.clone(),
            status: ExecStatus::Ok,
            feedback: score.map(|s| vec![FeedbackRecord::new("general.nrmse", s)]).unwrap_or_default(),
            score,
            diagnostics: Diagnostics::default(),
            detail: String::new(),
            runtime_seconds: 0.0,
            debug_iterations_used: 0,
            debug_candidates: Vec::new(),
        })
    }
}

#[test]
fn flat_scores_saturate_after_window_plus_one_rounds() {
    let (pool, mut gw) = pool(8);
    let state = TournamentState::new(pool, config(FeedbackKind::Nrmse, 4, 1), "rd".into()).unwrap();
    let mut ev = Scripted { calls: 0, score: |_| Some(0.1) };
    let out = run_synthesis(state, &mut gw, &PromptSet::builtin(), &mut ev, None, &RunControl::default()).unwrap();
    let rounds = &out.state.history;
    assert_eq!(rounds.len(), 3);
    assert_eq!(rounds.iter().map(|r| r.saturated).collect::<Vec<_>>(), [false, false, true]);
    assert!(rounds[2].patches.is_empty());
    assert_eq!(out.evaluations_used, 9);
}

#[test]
fn steady_gains_run_to_the_round_cap() {
    let (pool, mut gw) = pool(8);
    let state = TournamentState::new(pool, config(FeedbackKind::Nrmse, 4, 1), "rd".into()).unwrap();
    let mut ev = Scripted { calls: 0, score: |i| Some(0.5f64.powi(i as i32)) };
    let out = run_synthesis(state, &mut gw, &PromptSet::builtin(), &mut ev, None, &RunControl::default()).unwrap();
    assert_eq!(out.state.history.len(), 4);
    assert!(!out.state.saturated);
    assert_eq!(out.best_score, Some(0.5f64.powi(11)));
}

#[test]
fn no_feedback_never_saturates_and_hides_the_metric() {
    let (pool, mut gw) = pool(8);
    let dir = tempfile::tempdir().unwrap();
    let store = TournamentStore::new(&dir.path().join("tournament")).unwrap();
    let state = TournamentState::new(pool, config(FeedbackKind::None, 3, 1), "rd".into()).unwrap();
    let mut ev = Scripted { calls: 0, score: |_| None };
    let out = run_synthesis(state, &mut gw, &PromptSet::builtin(), &mut ev, Some(&store), &RunControl::default()).unwrap();
    assert_eq!(out.state.history.len(), 3);
    assert_eq!(out.best_score, None);
    let report = render_report(dir.path()).unwrap();
    assert!(report.contains("| Judge | Candidate | Status | dt_max |"), "{report}");
    assert!(!report.contains("| Metric |"));
    assert!(report.contains("not applicable"));
}

#[test]
fn second_cycle_opens_new_judge_conversations() {
    let (pool, mut gw) = pool(8);
    let start = gw.ledger().len();
    let state = TournamentState::new(pool, config(FeedbackKind::Nrmse, 2, 2), "rd".into()).unwrap();
    let mut ev = Scripted { calls: 0, score: |i| Some(1.0 / (1.0 + i as f64)) };
    let out = run_synthesis(state, &mut gw, &PromptSet::builtin(), &mut ev, None, &RunControl::default()).unwrap();
    let selects = gw.ledger()[start..].iter().filter(|u| u.purpose == Purpose::JudgeSelect).count();
    assert_eq!(selects, 6);
    assert_eq!(out.state.history.iter().map(|r| r.cycle).collect::<Vec<_>>(), [1, 1, 2, 2]);
    assert_eq!(out.evaluations_used, 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn evaluations_equal_executed_lanes(half in 1usize..6, judges in 2usize..5, rounds in 1u32..4, seed in any::<u64>()) {
        let (pool, mut gw) = pool(2 * half);
        let mut cfg = config(FeedbackKind::Nrmse, rounds, 2);
        cfg.judges = vec![ModelChoice::new(DESK_MODEL); judges];
        let state = TournamentState::new(pool, cfg, "rd".into()).unwrap();
        let mut x = seed | 1;
        let mut ev = Scripted { calls: 0, score: move |_| {
            x ^= x << 13; x ^= x >> 7; x ^= x << 17;
            Some((x % 1000) as f64 / 1000.0 + 1e-3)
        }};
        let out = run_synthesis(state, &mut gw, &PromptSet::builtin(), &mut ev, None, &RunControl::default()).unwrap();
        let lanes: usize = out.state.history.iter().map(|r| r.lanes.len()).sum();
        prop_assert_eq!(out.evaluations_used as usize, lanes);
        prop_assert_eq!(ev.calls as usize, lanes);
        for v in out.state.history.iter().flat_map(|r| &r.verdicts) {
            prop_assert_eq!(v.shortlist.len(), half);
            prop_assert!(v.shortlist.iter().any(|e| e.id == v.nominee));
        }
        let best = out.state.history.iter().filter_map(|r| r.best.as_ref().map(|b| b.1)).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(out.best_score, Some(best));
    }
}
