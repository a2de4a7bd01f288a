//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line, even when the others pass.
//!
//! Pinned tolerances: frequencies +-0.01 Hz, octave deviation <= 0.01 Hz
//! (plus 1e-9 for float representation of the rounded table), runtime
//! limits 5 s and 30 s as stated per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use trigger_gateway::devices::{note_frequency, DeviceRegistry, DeviceState, FanState};
use trigger_gateway::envelope::{
    canonical_json, decode_envelope, encode_envelope, serialize_response, ErrorCode, HandlerResponse,
    SmartHomeRequest, TriggerEnvelope,
};
use trigger_gateway::fixtures;
use trigger_gateway::gateway::{run, GatewayConfig, HandlerRegistration, ServerHandle};
use trigger_gateway::smarthome::{
    self, dispatch, start_mock, ClientError, DeviceType, Fixture, SmartHomeClient, ALLOWED_FUNCTIONS,
};
use trigger_gateway::world::{run_scenario, Action, Scenario};

type Verdict = Result<String, String>;

fn ensure(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn criterion(n: u32, title: &str, limit: Option<Duration>, body: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    });
    let elapsed = start.elapsed();
    let result = match (result, limit) {
        (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:?}, limit {limit:?}")),
        (r, _) => r,
    };
    let limit_note = limit.map(|l| format!(", limit {}s", l.as_secs())).unwrap_or_default();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    println!(
        "criterion {n:>2} {tag}  {title}: {detail} [{} ms{limit_note}]",
        elapsed.as_millis()
    );
    result.is_ok()
}

fn gateway_with_devices() -> (ServerHandle, DeviceRegistry, String) {
    let devices = DeviceRegistry::demo();
    let reg = devices.install(HandlerRegistration::new()).unwrap();
    let server = run(GatewayConfig::default(), reg).unwrap();
    let url = server.open_loopback().unwrap().public_url;
    (server, devices, url)
}

fn c1_fan() -> Verdict {
    let (server, devices, url) = gateway_with_devices();
    let scenario = fixtures::scenario("fan_3users").unwrap();
    let joins = scenario.events.iter().filter(|e| e.action == Action::Join).count();
    ensure(joins == 3, "fixture should have 3 joins")?;
    let report = run_scenario(&scenario, &url);

    let log = server.log().entries();
    ensure(log.len() == 3, format!("RequestLog has {} entries, want 3", log.len()))?;
    let commands: Vec<String> = log.iter().map(|e| e.envelope.as_ref().unwrap().request.clone()).collect();
    ensure(commands == ["on", "off", "on"], format!("commands {commands:?}"))?;

    // Oracle: apply the commands in arrival order to a fresh fan.
    let mut oracle = DeviceState::fan("oracle");
    for c in &commands {
        oracle.apply(c, None).unwrap();
    }
    let fan = devices.lock("fan");
    ensure(fan.fan_state() == Some(FanState::Running), "fan not Running")?;
    ensure(fan.fan_state() == oracle.fan_state(), "fan differs from oracle")?;
    let event_ids: Vec<_> = fan.events().iter().map(|e| e.request_id.clone().unwrap()).collect();
    let arrival_ids: Vec<_> = log.iter().map(|e| e.request_id.clone()).collect();
    ensure(event_ids == arrival_ids, "fan event order differs from arrival order")?;
    ensure(report.failed_calls == 0, "failed calls")?;
    Ok(format!("log=3 {commands:?}, final=Running, event order == arrival order"))
}

fn c2_doorbell() -> Verdict {
    let (server, devices, url) = gateway_with_devices();
    let scenario = fixtures::scenario("doorbell_owner_offline").unwrap();
    let owner = scenario.users.iter().find(|u| u.is_owner).unwrap().user_id.clone();
    let owner_joins = scenario
        .events
        .iter()
        .any(|e| e.action == Action::Join && e.user_id == owner);
    ensure(!owner_joins, "owner joins in fixture")?;
    let entries = scenario.events.iter().filter(|e| e.action == Action::EnterRegion).count();
    ensure(entries == 2, "fixture should have 2 region entries")?;

    run_scenario(&scenario, &url);
    let chimes = devices.lock("doorbell").chime_count().unwrap();
    ensure(chimes == 2, format!("chime_count {chimes}"))?;
    let from_owner = server
        .log()
        .dispatched()
        .iter()
        .filter(|e| e.envelope.as_ref().unwrap().user_id == owner)
        .count();
    ensure(from_owner == 0, "a request carried the owner id")?;
    Ok("owner offline, 2 entries -> chime_count 2".into())
}

fn c3_presence_lamp() -> Verdict {
    let (_server, devices, url) = gateway_with_devices();
    let initial = devices.lock("lamp").brightness().unwrap();
    ensure(initial == 0, format!("brightness(0) = {initial}"))?;
    let scenario = fixtures::scenario("presence_lamp").unwrap();
    let report = run_scenario(&scenario, &url);
    ensure(report.forwarded_calls == 10, "10 joins should forward 10 calls")?;

    let lamp = devices.lock("lamp");
    let trace: Vec<u64> = lamp
        .events()
        .iter()
        .map(|e| serde_json::to_value(&e.state).unwrap()["brightness"].as_u64().unwrap())
        .collect();
    let expected: Vec<u64> = (1..=10).map(|k: u64| (20 * k).min(100)).collect();
    ensure(trace.windows(2).all(|w| w[0] <= w[1]), format!("not monotone: {trace:?}"))?;
    ensure(trace == expected, format!("trace {trace:?}, want {expected:?}"))?;
    Ok(format!("0 then {trace:?}"))
}

fn c4_piano() -> Verdict {
    const TOL: f64 = 0.01;
    let low = note_frequency(0).unwrap();
    let high = note_frequency(44).unwrap();
    ensure((low - 110.00).abs() <= TOL, format!("tone(0) = {low}"))?;
    ensure((high - 1396.91).abs() <= TOL, format!("tone(44) = {high}"))?;

    let mut speaker = DeviceState::tone_speaker("piano");
    let played_low = speaker.tone_play(0).unwrap();
    let played_high = speaker.tone_play(44).unwrap();
    ensure(played_low == low && played_high == high, "tone_play disagrees with note_frequency")?;

    let mut worst: f64 = 0.0;
    for n in 0..=32 {
        let d = (note_frequency(n + 12).unwrap() - 2.0 * note_frequency(n).unwrap()).abs();
        worst = worst.max(d);
    }
    ensure(worst <= TOL + 1e-9, format!("octave deviation {worst}"))?;
    Ok(format!("{low:.2} Hz .. {high:.2} Hz, max octave deviation {worst:.4} Hz"))
}

fn random_text(rng: &mut ChaCha8Rng, min_len: usize) -> String {
    const POOL: &[char] = &[
        'a', 'Z', '0', ' ', '"', '\'', '\\', '/', '\n', '\r', '\t', '\u{0}', '\u{1f}', '\u{7f}', 'é', 'ß', '日',
        '本', 'ж', '🎉', '🔔', '\u{2028}', '\u{feff}', '{', '}', '[', ']', ':', ',',
    ];
    let len = rng.random_range(min_len..40);
    (0..len).map(|_| POOL[rng.random_range(0..POOL.len())]).collect()
}

fn c5_envelope_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE11E);
    let mut failures = 0;
    for _ in 0..1000 {
        let env = TriggerEnvelope {
            request: random_text(&mut rng, 0),
            // Empty ids are replaced on decode, so generated ids are non-empty.
            request_id: random_text(&mut rng, 1),
            world_id: random_text(&mut rng, 0),
            item_id: random_text(&mut rng, 0),
            user_id: random_text(&mut rng, 0),
            timestamp_ms: rng.random(),
        };
        if decode_envelope(&encode_envelope(&env)).ok() != Some(env) {
            failures += 1;
        }
    }
    ensure(failures == 0, format!("{failures} of 1000 failed"))?;
    Ok("1000/1000 round-trips".into())
}

fn c6_resilience() -> Verdict {
    let reg = HandlerRegistration::new()
        .receive(|s: &str| format!("ok:{s}"))
        .unwrap();
    let server = run(GatewayConfig::default(), reg).unwrap();
    let url = server.trigger_url();
    let bad: [&[u8]; 10] = [
        b"not json at all",
        b"",
        b"{\"request\": \"on\"",
        b"[\"request\", \"on\"]",
        b"{\"request\": 42}",
        b"{\"request\": null}",
        b"{\"userId\": \"u1\"}",
        b"{\"request\": \"on\", \"timestampMs\": \"yesterday\"}",
        b"{\"request\": \"on\", \"userId\": [1, 2]}",
        b"\xff\xfe{\"request\":\"on\"}",
    ];
    for (i, body) in bad.iter().enumerate() {
        let (status, text) = common::post(&url, body).map_err(|e| format!("body {i}: transport {e}"))?;
        ensure((400..600).contains(&status), format!("body {i}: status {status}"))?;
        let v: Value = serde_json::from_str(&text).map_err(|_| format!("body {i}: unstructured {text}"))?;
        ensure(v["error"]["code"].is_string() && v["error"]["message"].is_string(), format!("body {i}: {text}"))?;
        let ok = format!("{{\"request\":\"after-{i}\"}}");
        let (status, text) = common::post(&url, ok.as_bytes()).map_err(|e| format!("after {i}: {e}"))?;
        ensure(status == 200, format!("valid request after body {i} got {status}"))?;
        ensure(common::json(&text)["response"] == format!("ok:after-{i}"), "wrong echo")?;
        ensure(server.is_running(), "server stopped")?;
    }
    Ok("10 malformed bodies -> 4xx/5xx JSON errors, each followed by a 200".into())
}

fn random_request(rng: &mut ChaCha8Rng, ids: &[String]) -> SmartHomeRequest {
    let name = ALLOWED_FUNCTIONS[rng.random_range(0..ALLOWED_FUNCTIONS.len())];
    let id = ids[rng.random_range(0..ids.len())].clone();
    let req = SmartHomeRequest::new(name);
    match name {
        "list_devices" => req,
        "set_brightness" => {
            let level = rng.random_range(-5..=110);
            if rng.random_bool(0.5) {
                req.arg(id).arg(level)
            } else {
                req.kwarg("device_id", id).kwarg("level", level)
            }
        }
        _ if rng.random_bool(0.5) => req.arg(id),
        _ => req.kwarg("device_id", id),
    }
}

fn direct(req: &SmartHomeRequest, client: &SmartHomeClient) -> HandlerResponse {
    fn wrap<T: serde::Serialize>(r: Result<T, ClientError>) -> HandlerResponse {
        match r {
            Ok(v) => HandlerResponse::ok(serde_json::to_value(v).unwrap()),
            Err(e) => HandlerResponse::Error(e.into()),
        }
    }
    let arg = |i: usize, name: &str| req.args.get(i).or_else(|| req.kwargs.get(name)).cloned().unwrap();
    if req.function_name == "list_devices" {
        return wrap(client.list_devices());
    }
    let id = arg(0, "device_id");
    let id = id.as_str().unwrap();
    match req.function_name.as_str() {
        "get_status" => wrap(client.get_status(id)),
        "turn_on" => wrap(client.turn_on(id)),
        "turn_off" => wrap(client.turn_off(id)),
        "press" => wrap(client.press(id)),
        "set_brightness" => wrap(client.set_brightness(id, arg(1, "level").as_i64().unwrap())),
        other => unreachable!("{other}"),
    }
}

/// Canonical JSON of the serialized response, with error messages blanked
/// because they may mention the server address.
fn canonical_outcome(resp: &HandlerResponse) -> String {
    let (status, body) = serialize_response(resp);
    let mut v: Value = serde_json::from_slice(&body).unwrap();
    if let Some(e) = v.get_mut("error") {
        e["message"] = Value::Null;
    }
    canonical_json(&json!({ "status": status, "body": v }))
}

fn c7_dispatch_oracle() -> Verdict {
    let a = start_mock(Fixture::workshop(), 0).unwrap();
    let b = start_mock(Fixture::workshop(), 0).unwrap();
    let (via_dispatch, via_client) = (a.client(), b.client());
    let mut ids: Vec<String> = Fixture::workshop().devices.into_iter().map(|d| d.device_id).collect();
    ids.push("no-such-device".into());
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut mismatches = 0;
    let mut ok_calls = 0;
    for _ in 0..500 {
        let req = random_request(&mut rng, &ids);
        let got = dispatch(&req, &via_dispatch);
        if matches!(got, HandlerResponse::Ok(_)) {
            ok_calls += 1;
        }
        if canonical_outcome(&got) != canonical_outcome(&direct(&req, &via_client)) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches} of 500 differ"))?;
    ensure(a.devices() == b.devices(), "mock states diverged")?;

    let unreachable = SmartHomeClient::new("http://127.0.0.1:9", "t");
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz_ABCXYZ0123456789.:/ ()-__".chars().collect();
    let mut fuzzed = 0;
    let mut wrong = 0;
    while fuzzed < 10_000 {
        let len = rng.random_range(1..20);
        let mut name: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        // Near misses of real names are the interesting cases.
        if rng.random_bool(0.2) {
            let base = ALLOWED_FUNCTIONS[rng.random_range(0..ALLOWED_FUNCTIONS.len())];
            name = match rng.random_range(0..3) {
                0 => base.to_uppercase(),
                1 => format!("{base}{}", &name[..1]),
                _ => format!("_{base}"),
            };
        }
        if ALLOWED_FUNCTIONS.contains(&name.as_str()) {
            continue;
        }
        fuzzed += 1;
        match dispatch(&SmartHomeRequest::new(name).arg("bulb-1"), &unreachable) {
            HandlerResponse::Error(e) if e.code == ErrorCode::UnknownFunction => {}
            _ => wrong += 1,
        }
    }
    ensure(wrong == 0, format!("{wrong} fuzzed names not rejected"))?;
    Ok(format!("500/500 equal ({ok_calls} succeeded), 10000/10000 fuzzed names UnknownFunction"))
}

fn c8_smarthome_e2e() -> Verdict {
    let mock = start_mock(Fixture::workshop(), 0).unwrap();
    let reg = HandlerRegistration::new()
        .route("smarthome", smarthome::handler(mock.client()))
        .unwrap();
    let server = run(GatewayConfig::default(), reg).unwrap();
    let url = server.open_loopback().unwrap().public_url;

    let payload = json!({"function_name": "turn_on", "args": ["bulb-1"]}).to_string();
    let scenario = Scenario::from_json(
        &json!({
            "seed": 1,
            "users": [{"userId": "maker"}],
            "items": [{"itemId": "bulb-switch", "kind": "clickable",
                       "script": {"targetRoute": "/trigger/smarthome", "payloadTemplate": payload}}],
            "events": [
                {"tMs": 0, "action": "join", "userId": "maker"},
                {"tMs": 10, "action": "click", "userId": "maker", "itemId": "bulb-switch"}
            ]
        })
        .to_string(),
    )
    .unwrap();
    let report = run_scenario(&scenario, &url);
    ensure(report.forwarded_calls == 1 && report.error_responses == 0, format!("report {report:?}"))?;

    // Read the mock over plain HTTP rather than through the client under test.
    let base = mock.base_url();
    let status_text = common::agent()
        .get(&format!("{base}/v1.1/devices/bulb-1/status"))
        .header("Authorization", mock.token())
        .call()
        .map_err(|e| e.to_string())?
        .body_mut()
        .read_to_string()
        .map_err(|e| e.to_string())?;
    let power = common::json(&status_text)["body"]["power"].clone();
    ensure(power == "on", format!("bulb-1 status {status_text}"))?;

    let list_text = common::agent()
        .get(&format!("{base}/v1.1/devices"))
        .header("Authorization", mock.token())
        .call()
        .map_err(|e| e.to_string())?
        .body_mut()
        .read_to_string()
        .map_err(|e| e.to_string())?;
    let list = common::json(&list_text)["body"]["deviceList"].as_array().cloned().unwrap_or_default();
    ensure(list.len() == 27, format!("{} devices listed", list.len()))?;
    let roster = [
        (DeviceType::Hub, 2),
        (DeviceType::Camera, 2),
        (DeviceType::MotionSensor, 4),
        (DeviceType::Meter, 1),
        (DeviceType::LedStrip, 1),
        (DeviceType::Bulb, 4),
        (DeviceType::Plug, 4),
        (DeviceType::Bot, 4),
        (DeviceType::Humidifier, 1),
        (DeviceType::RemoteButton, 2),
        (DeviceType::Circulator, 2),
    ];
    for (kind, want) in roster {
        let tag = serde_json::to_value(kind).unwrap();
        let got = list.iter().filter(|d| d["deviceType"] == tag).count();
        ensure(got == want, format!("{tag}: {got}, want {want}"))?;
    }
    Ok("click -> bulb-1 power=on; roster 27 devices, counts match".into())
}

fn c9_concurrency() -> Verdict {
    let devices = DeviceRegistry::demo();
    let reg = devices.install(HandlerRegistration::new()).unwrap();
    let server = run(GatewayConfig::default(), reg).unwrap();
    let url = format!("{}/fan", server.trigger_url());
    let barrier = Arc::new(Barrier::new(100));
    let threads: Vec<_> = (0..100)
        .map(|i| {
            let url = url.clone();
            let barrier = barrier.clone();
            std::thread::spawn(move || {
                let cmd = if (i * 7) % 3 == 0 { "on" } else { "off" };
                let body = json!({"request": cmd, "requestId": format!("c9-{i:03}"), "userId": format!("u{i}")});
                barrier.wait();
                common::post(&url, body.to_string().as_bytes()).map(|(s, _)| s)
            })
        })
        .collect();
    for t in threads {
        let status = t.join().unwrap().map_err(|e| e.to_string())?;
        ensure(status == 200, format!("status {status}"))?;
    }

    let log = server.log().entries();
    let fan = devices.lock("fan");
    let events = fan.events();
    ensure(events.len() == 100, format!("event log has {}", events.len()))?;
    let orders: Vec<u64> = events.iter().map(|e| e.order).collect();
    ensure(orders == (0..100).collect::<Vec<u64>>(), "event orders have gaps")?;
    let arrivals: Vec<u64> = log.iter().map(|e| e.arrival_order).collect();
    ensure(arrivals == (0..100).collect::<Vec<u64>>(), "arrival orders have gaps")?;

    let mut oracle = DeviceState::fan("oracle");
    for entry in &log {
        oracle.apply(&entry.envelope.as_ref().unwrap().request, None).unwrap();
    }
    let event_ids: Vec<_> = events.iter().map(|e| e.request_id.clone().unwrap()).collect();
    let log_ids: Vec<_> = log.iter().map(|e| e.request_id.clone()).collect();
    ensure(event_ids == log_ids, "device order differs from arrival order")?;
    ensure(fan.fan_state() == oracle.fan_state(), "final state differs from sequential oracle")?;
    Ok(format!("100 events, gap-free, final {:?} == oracle", fan.fan_state().unwrap()))
}

fn c10_determinism() -> Verdict {
    let mut reports = Vec::new();
    for name in ["fan_3users", "smarthome"] {
        let scenario = fixtures::scenario(name).unwrap();
        let run_once = || {
            let mock = start_mock(Fixture::workshop(), 0).unwrap();
            let devices = DeviceRegistry::demo();
            let reg = devices
                .install(HandlerRegistration::new())
                .unwrap()
                .route("smarthome", smarthome::handler(mock.client()))
                .unwrap();
            let server = run(GatewayConfig::default(), reg).unwrap();
            let url = server.open_loopback().unwrap().public_url;
            run_scenario(&scenario, &url).to_json()
        };
        let (first, second) = (run_once(), run_once());
        ensure(first.as_bytes() == second.as_bytes(), format!("{name}: reports differ"))?;
        reports.push(first.len());
    }
    Ok(format!("byte-identical reports ({} and {} bytes)", reports[0], reports[1]))
}

fn main() {
    // Panics are reported on the criterion's FAIL line instead.
    std::panic::set_hook(Box::new(|_| {}));
    let five = Some(Duration::from_secs(5));
    let results = [
        criterion(1, "end-to-end fan scenario", five, c1_fan),
        criterion(2, "offline-owner doorbell", five, c2_doorbell),
        criterion(3, "presence lamp trace", five, c3_presence_lamp),
        criterion(4, "piano endpoints and octaves", None, c4_piano),
        criterion(5, "envelope round-trip fuzz", None, c5_envelope_fuzz),
        criterion(6, "malformed-input resilience", None, c6_resilience),
        criterion(7, "dispatch-oracle equivalence", None, c7_dispatch_oracle),
        criterion(8, "smart-home end-to-end", None, c8_smarthome_e2e),
        criterion(9, "concurrent serialization", Some(Duration::from_secs(30)), c9_concurrency),
        criterion(10, "deterministic replay", None, c10_determinism),
    ];
    let passed = results.iter().filter(|ok| **ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
