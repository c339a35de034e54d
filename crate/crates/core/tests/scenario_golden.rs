//! Virtual-time run of the default system against committed traces. Set
//! `UPDATE_GOLDEN=1` to rewrite the files after an intended change.

use std::path::PathBuf;
use std::time::Duration;

use aal_core::devices::{Reading, Topology};
use aal_core::rules::{Emitted, RuleSet};
use aal_core::scenario::{run_scenario, ScenarioOutcome, DEFAULT_SCRIPT, LATE_CONFIRM_SCRIPT};
use aal_core::script::parse_script;
use aal_core::{Modality, RenderCosts};

fn run(script: &str) -> ScenarioOutcome {
    run_scenario(
        Topology::default_topology(),
        RuleSet::default_rules(),
        RenderCosts::default(),
        &parse_script(script).unwrap(),
    )
    .unwrap()
}

fn check_golden(name: &str, outcome: &ScenarioOutcome) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let actual = outcome.trace_text();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    assert!(actual == expected, "trace differs from {}:\n{actual}", path.display());
}

fn actions(outcome: &ScenarioOutcome, rule: &str) -> Vec<(u64, String)> {
    outcome
        .emitted
        .iter()
        .filter(|(_, e)| e.rule_id() == rule)
        .map(|(t, e)| (t.as_millis() as u64, e.to_string()))
        .collect()
}

#[test]
fn default_script_matches_golden() {
    check_golden("scenario.trace", &run(DEFAULT_SCRIPT));
}

#[test]
fn late_confirmation_matches_golden() {
    check_golden("scenario_late_confirm.trace", &run(LATE_CONFIRM_SCRIPT));
}

#[test]
fn runs_are_byte_identical() {
    assert_eq!(run(DEFAULT_SCRIPT).trace_text(), run(DEFAULT_SCRIPT).trace_text());
}

#[test]
fn scenario_semantics() {
    let out = run(DEFAULT_SCRIPT);
    let meds = actions(&out, "medication_reminder");
    assert_eq!(meds.len(), 2);
    assert!(meds[0].1.ends_with("image3d pills") && meds[1].1.ends_with("audio medication_time"));

    let family = actions(&out, "family_recognition");
    assert_eq!(family.len(), 2, "the timed-out scan publishes nothing");
    assert_eq!(family[0].0, 20_400);

    let dishes: Vec<u64> = actions(&out, "dishes_reminder").iter().map(|(t, _)| *t).collect();
    assert_eq!(dishes, [30_000, 30_000, 36_000, 36_000]);

    let heater = actions(&out, "cold_heater_prompt");
    assert_eq!(heater.len(), 2);
    assert!(heater[0].1.contains("text heater"));
    assert_eq!(heater[1], (70_000, "cold_heater_prompt actuate home/tvroom/heater_relay/set 1".into()));

    let flame = actions(&out, "flame_oven_off");
    assert_eq!(flame[0].1, "flame_oven_off actuate home/kitchen/oven_relay/set 0");
    assert!(flame[1].1.ends_with("image3d flame_alert"));

    let heater_on = out
        .state_log
        .iter()
        .find(|c| c.device_id == "heater_relay")
        .unwrap();
    assert_eq!((heater_on.old, heater_on.new), (Reading::Bool(false), Reading::Bool(true)));
    let oven = out.state_log.iter().find(|c| c.device_id == "oven_relay").unwrap();
    assert_eq!(oven.new, Reading::Bool(false));

    let ids: Vec<u64> = out.render_log.iter().map(|e| e.notif_id).collect();
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(ids, sorted, "render order is notif_id order, no repeats");
    let notify_count = out
        .emitted
        .iter()
        .filter(|(_, e)| matches!(e, Emitted::Notify { .. }))
        .count();
    assert_eq!(out.render_log.len(), notify_count, "every notification rendered once");
    for e in &out.render_log {
        assert!(e.render_complete_time() >= e.receive_time());
    }
    let audio = out.render_log.iter().find(|e| e.modality == Modality::Audio).unwrap();
    assert!(audio.render_complete_time() - audio.receive_time() >= Duration::from_millis(364));
}

#[test]
fn late_confirmation_never_switches_heater() {
    let out = run(LATE_CONFIRM_SCRIPT);
    assert!(out
        .emitted
        .iter()
        .all(|(_, e)| !matches!(e, Emitted::Actuate { topic, .. } if topic.contains("heater"))));
    assert!(out.state_log.iter().all(|c| c.device_id != "heater_relay"));
    assert!(out.trace.iter().any(|l| l.ends_with("cold_heater_prompt confirmation expired")));
}
