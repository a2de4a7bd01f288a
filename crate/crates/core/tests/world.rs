use trigger_gateway::devices::{DeviceRegistry, FanState};
use trigger_gateway::fixtures;
use trigger_gateway::gateway::{run, GatewayConfig, HandlerRegistration, ServerHandle};
use trigger_gateway::world::{run_scenario, Action, CallOutcome, RateLimit, Scenario, ScenarioEvent};

fn gateway() -> (ServerHandle, DeviceRegistry, String) {
    let devices = DeviceRegistry::demo();
    let reg = devices.install(HandlerRegistration::new()).unwrap();
    let server = run(GatewayConfig::default(), reg).unwrap();
    let url = server.open_loopback().unwrap().public_url;
    (server, devices, url)
}

/// A port nobody listens on: bind, note it, release it.
fn dead_url() -> String {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    format!("http://127.0.0.1:{port}/nobody")
}

#[test]
fn fan_scenario_end_to_end() {
    let (server, devices, url) = gateway();
    let scenario = fixtures::scenario("fan_3users").unwrap();
    let report = run_scenario(&scenario, &url);

    assert_eq!(report.forwarded_calls, 3);
    assert_eq!(report.failed_calls, 0);
    assert_eq!(report.connected_users, 3);
    let log = server.log().dispatched();
    assert_eq!(log.len(), 3);
    let requests: Vec<&str> = log.iter().map(|e| e.envelope.as_ref().unwrap().request.as_str()).collect();
    assert_eq!(requests, ["on", "off", "on"]);

    let fan = devices.lock("fan");
    assert_eq!(fan.fan_state(), Some(FanState::Running));
    let event_ids: Vec<_> = fan.events().iter().map(|e| e.request_id.clone().unwrap()).collect();
    let log_ids: Vec<_> = log.iter().map(|e| e.request_id.clone()).collect();
    assert_eq!(event_ids, log_ids);
}

#[test]
fn envelopes_carry_the_triggering_user() {
    let (server, _devices, url) = gateway();
    let scenario = fixtures::scenario("doorbell_owner_offline").unwrap();
    let report = run_scenario(&scenario, &url);
    let owners: Vec<&str> = scenario.users.iter().filter(|u| u.is_owner).map(|u| u.user_id.as_str()).collect();

    let from_log: Vec<String> = server
        .log()
        .dispatched()
        .iter()
        .map(|e| e.envelope.as_ref().unwrap().user_id.clone())
        .collect();
    let from_report: Vec<String> = report.calls.iter().map(|c| c.user_id.clone()).collect();
    assert_eq!(from_log, ["guest1", "guest2"]);
    assert_eq!(from_log, from_report);
    assert!(from_log.iter().all(|u| !owners.contains(&u.as_str())));
}

#[test]
fn doorbell_rings_with_owner_offline() {
    let (_server, devices, url) = gateway();
    let scenario = fixtures::scenario("doorbell_owner_offline").unwrap();
    let report = run_scenario(&scenario, &url);
    let entries = scenario.events.iter().filter(|e| e.action == Action::EnterRegion).count() as u64;
    assert_eq!(devices.lock("doorbell").chime_count(), Some(entries));
    assert_eq!(report.forwarded_calls, entries);
}

#[test]
fn presence_lamp_trace() {
    let (_server, devices, url) = gateway();
    let report = run_scenario(&fixtures::scenario("presence_lamp").unwrap(), &url);
    assert_eq!(report.forwarded_calls, 10);
    let lamp = devices.lock("lamp");
    let trace: Vec<u8> = lamp
        .events()
        .iter()
        .map(|e| serde_json::to_value(&e.state).unwrap()["brightness"].as_u64().unwrap() as u8)
        .collect();
    let expected: Vec<u8> = (1..=10).map(|k| (20 * k).min(100) as u8).collect();
    assert_eq!(trace, expected);
}

#[test]
fn same_seed_same_report() {
    let scenario = fixtures::scenario("fan_3users").unwrap();
    let (_a, _da, url_a) = gateway();
    let (_b, _db, url_b) = gateway();
    let first = run_scenario(&scenario, &url_a).to_json();
    let second = run_scenario(&scenario, &url_b).to_json();
    assert_eq!(first.as_bytes(), second.as_bytes());

    let mut reseeded = scenario.clone();
    reseeded.seed += 1;
    let (_c, _dc, url_c) = gateway();
    assert_ne!(run_scenario(&reseeded, &url_c).to_json(), first);
}

#[test]
fn gateway_down_marks_every_call_failed() {
    let scenario = fixtures::scenario("fan_3users").unwrap();
    let url = dead_url();
    let report = run_scenario(&scenario, &url);
    assert_eq!(report.forwarded_calls, 3);
    assert_eq!(report.failed_calls, 3);
    assert!(report.calls.iter().all(|c| matches!(c.outcome, CallOutcome::Failed { .. })));
    assert_eq!(report.to_json(), run_scenario(&scenario, &url).to_json());
}

#[test]
fn rate_limit_enforced_over_http() {
    let (server, devices, url) = gateway();
    let mut scenario = fixtures::scenario("doorbell_owner_offline").unwrap();
    scenario.rate_limit = RateLimit { max_calls: 5, window_ms: 1000 };
    scenario.events = std::iter::once(ScenarioEvent {
        t_ms: 0,
        action: Action::Join,
        user_id: "guest1".into(),
        item_id: None,
    })
    .chain((0..10).map(|i| ScenarioEvent {
        t_ms: 100 + i * 20,
        action: Action::EnterRegion,
        user_id: "guest1".into(),
        item_id: Some("porch".into()),
    }))
    .collect();
    let report = run_scenario(&scenario, &url);
    assert_eq!((report.forwarded_calls, report.dropped_calls), (5, 5));
    assert_eq!(server.log().len(), 5);
    assert_eq!(devices.lock("doorbell").chime_count(), Some(5));
    assert!(report.rate_limit_sound(scenario.rate_limit));
}

#[test]
fn disconnected_users_and_kind_errors() {
    let (server, _devices, url) = gateway();
    let text = r#"{
  "users": [{"userId": "u1"}, {"userId": "u2"}],
  "items": [
    {"itemId": "fan", "kind": "clickable", "script": {"targetRoute": "/trigger/fan", "payloadTemplate": "on"}},
    {"itemId": "porch", "kind": "floorRegion", "script": {"targetRoute": "/trigger/doorbell", "payloadTemplate": "ring"}}
  ],
  "events": [
    {"tMs": 0, "action": "click", "userId": "u1", "itemId": "fan"},
    {"tMs": 1, "action": "join", "userId": "u2"},
    {"tMs": 2, "action": "click", "userId": "u2", "itemId": "porch"},
    {"tMs": 3, "action": "enterRegion", "userId": "u2", "itemId": "fan"},
    {"tMs": 4, "action": "click", "userId": "u2", "itemId": "ghost"},
    {"tMs": 5, "action": "leave", "userId": "u2"},
    {"tMs": 6, "action": "enterRegion", "userId": "u2", "itemId": "porch"}
  ]
}"#;
    let report = run_scenario(&Scenario::from_json(text).unwrap(), &url);
    assert_eq!(report.forwarded_calls, 0);
    assert_eq!(report.skipped_events, 2);
    assert_eq!(report.errors.len(), 3);
    assert_eq!(server.log().len(), 0);
}

#[test]
fn responses_logged_per_item() {
    let (_server, _devices, url) = gateway();
    let report = run_scenario(&fixtures::scenario("piano").unwrap(), &url);
    assert_eq!(report.forwarded_calls, 45);
    let first = &report.delivered_responses("key-0")[0];
    let last = &report.delivered_responses("key-44")[0];
    let hz = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap()["lastFreqHz"].as_f64().unwrap();
    assert!((hz(first) - 110.0).abs() <= 0.01);
    assert!((hz(last) - 1396.91).abs() <= 0.01);
}

#[test]
fn unknown_route_is_an_error_response_not_a_failure() {
    let (_server, _devices, url) = gateway();
    let text = r#"{
  "users": [{"userId": "u1"}],
  "items": [{"itemId": "x", "kind": "clickable", "script": {"targetRoute": "/trigger/nothing-here", "payloadTemplate": "hi"}}],
  "events": [{"tMs": 0, "action": "join", "userId": "u1"}, {"tMs": 1, "action": "click", "userId": "u1", "itemId": "x"}]
}"#;
    let report = run_scenario(&Scenario::from_json(text).unwrap(), &url);
    assert_eq!((report.forwarded_calls, report.failed_calls, report.error_responses), (1, 0, 1));
    match &report.calls[0].outcome {
        CallOutcome::Delivered { status, error, .. } => {
            assert_eq!(*status, 404);
            assert!(error.is_some());
        }
        other => panic!("{other:?}"),
    }
}
