//! Built-in demos: start a private gateway, replay a shipped scenario against
//! it, then check the demo's invariants. The first failed check ends the demo
//! with exit code 1.

use serde_json::Value;
use trigger_gateway::devices::{DeviceRegistry, FanState};
use trigger_gateway::fixtures;
use trigger_gateway::gateway::{self, GatewayConfig, HandlerRegistration, ServerHandle};
use trigger_gateway::smarthome::{self, start_mock, Fixture, MockServerHandle, SmartHomeClient};
use trigger_gateway::world::{run_scenario, Action, CallOutcome, Scenario, WorldReport};

use crate::serve::{smarthome_client, startup_failure};
use crate::{emit, print_report, DemoArgs, DemoName, Failure, LogFormat};

struct Rig {
    server: ServerHandle,
    devices: DeviceRegistry,
    url: String,
    // Kept alive for the duration of the demo.
    mock: Option<MockServerHandle>,
}

fn rig(smarthome: Option<SmartHomeClient>) -> Result<Rig, Failure> {
    let devices = DeviceRegistry::demo();
    let mut reg = devices
        .install(HandlerRegistration::new())
        .map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(client) = smarthome {
        reg = reg
            .route("smarthome", smarthome::handler(client))
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let server = gateway::run(GatewayConfig::default(), reg).map_err(startup_failure)?;
    let url = server
        .open_loopback()
        .map_err(|e| Failure::Config(e.to_string()))?
        .public_url;
    Ok(Rig {
        server,
        devices,
        url,
        mock: None,
    })
}

fn check(ok: bool, what: &str) -> Result<(), Failure> {
    if ok {
        emit(&format!("check {what}: ok"));
        Ok(())
    } else {
        Err(Failure::Check(format!("check failed: {what}")))
    }
}

fn scenario_for(name: DemoName) -> &'static str {
    match name {
        DemoName::Fan => "fan_demo",
        DemoName::Doorbell => "doorbell_owner_offline",
        DemoName::PresenceLamp => "presence_lamp",
        DemoName::Piano => "piano",
        DemoName::Smarthome => "smarthome",
    }
}

pub fn run(args: DemoArgs, format: LogFormat) -> Result<(), Failure> {
    let mut scenario =
        fixtures::scenario(scenario_for(args.name)).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }

    let rig = if args.name == DemoName::Smarthome {
        match smarthome_client(&args.smarthome) {
            Some(client) => rig(Some(client))?,
            None => {
                let mock = start_mock(Fixture::workshop(), 0).map_err(|e| Failure::Config(e.to_string()))?;
                let mut r = rig(Some(mock.client()))?;
                r.mock = Some(mock);
                r
            }
        }
    } else {
        rig(None)?
    };

    let report = run_scenario(&scenario, &rig.url);
    print_report(&report, format);

    check(report.failed_calls == 0, "every forwarded call reached the gateway")?;
    check(
        report.rate_limit_sound(scenario.rate_limit),
        "rate limit holds in every window",
    )?;
    let result = match args.name {
        DemoName::Fan => fan(&rig),
        DemoName::Doorbell => doorbell(&rig, &scenario, &report),
        DemoName::PresenceLamp => presence_lamp(&rig),
        DemoName::Piano => piano(&report),
        DemoName::Smarthome => smarthome_checks(&rig, &args, &report),
    };
    rig.server.shutdown();
    result
}

fn fan(rig: &Rig) -> Result<(), Failure> {
    let log: Vec<_> = rig.server.log().dispatched().into_iter().filter(|e| e.route == "fan").collect();
    // Oracle: the last command in arrival order decides.
    let expected = match log.last().and_then(|e| e.envelope.as_ref()).map(|e| e.request.as_str()) {
        Some("on") => FanState::Running,
        _ => FanState::Stopped,
    };
    let fan = rig.devices.lock("fan");
    let state = fan.fan_state().expect("fan device");
    emit(&format!("fan final state: {}", if state == FanState::Running { "running" } else { "stopped" }));
    check(state == expected, "fan state equals the last command in arrival order")?;
    check(state == FanState::Stopped, "on/off sequence leaves the fan stopped")?;
    let events: Vec<_> = fan.events().iter().map(|e| e.request_id.clone().unwrap_or_default()).collect();
    let arrivals: Vec<_> = log.iter().map(|e| e.request_id.clone()).collect();
    check(events == arrivals, "fan event order equals gateway arrival order")
}

fn doorbell(rig: &Rig, scenario: &Scenario, report: &WorldReport) -> Result<(), Failure> {
    let owners: Vec<&str> = scenario.users.iter().filter(|u| u.is_owner).map(|u| u.user_id.as_str()).collect();
    let owner_joined = scenario
        .events
        .iter()
        .any(|e| e.action == Action::Join && owners.contains(&e.user_id.as_str()));
    let entries = report.calls.iter().filter(|c| c.forwarded()).count() as u64;
    let chimes = rig.devices.lock("doorbell").chime_count().unwrap_or(0);
    emit(&format!("chime count: {chimes} (owner online: {owner_joined})"));
    check(!owner_joined, "owner never joins")?;
    check(chimes == entries, "chime count equals forwarded region entries")?;
    let senders_ok = rig
        .server
        .log()
        .dispatched()
        .iter()
        .all(|e| !owners.contains(&e.envelope.as_ref().unwrap().user_id.as_str()));
    check(senders_ok, "no request carries the owner's id")
}

fn presence_lamp(rig: &Rig) -> Result<(), Failure> {
    let lamp = rig.devices.lock("lamp");
    let trace: Vec<u64> = lamp
        .events()
        .iter()
        .map(|e| serde_json::to_value(&e.state).ok().and_then(|v| v["brightness"].as_u64()).unwrap_or(0))
        .collect();
    emit(&format!(
        "brightness trace: {}",
        trace.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    ));
    let expected: Vec<u64> = (1..=trace.len() as u64).map(|k| (20 * k).min(100)).collect();
    check(!trace.is_empty(), "lamp received updates")?;
    check(trace.windows(2).all(|w| w[0] <= w[1]), "brightness never decreases as users join")?;
    check(trace == expected, "brightness equals min(100, 20 * users)")
}

fn freq_of(response: &str) -> Option<f64> {
    serde_json::from_str::<Value>(response).ok()?["lastFreqHz"].as_f64()
}

fn piano(report: &WorldReport) -> Result<(), Failure> {
    let mut played = Vec::new();
    for n in 0..=44u32 {
        let hz = report
            .delivered_responses(&format!("key-{n}"))
            .first()
            .and_then(|r| freq_of(r));
        played.push(hz);
    }
    let low = played[0].unwrap_or(f64::NAN);
    let high = played[44].unwrap_or(f64::NAN);
    emit(&format!("lowest note: {low:.2} Hz"));
    emit(&format!("highest note: {high:.2} Hz"));
    check((low - 110.0).abs() <= 0.01, "lowest key plays 110.00 Hz")?;
    check((high - 1396.91).abs() <= 0.01, "highest key plays 1396.91 Hz")?;
    let all_equal_tempered = played.iter().enumerate().all(|(n, hz)| {
        hz.is_some_and(|hz| (hz - 110.0 * 2f64.powf(n as f64 / 12.0)).abs() <= 0.01)
    });
    check(all_equal_tempered, "every key follows 110 * 2^(n/12)")
}

fn smarthome_checks(rig: &Rig, args: &DemoArgs, report: &WorldReport) -> Result<(), Failure> {
    let client = match &rig.mock {
        Some(mock) => mock.client(),
        None => smarthome_client(&args.smarthome).expect("base URL given"),
    };
    let switch_calls: Vec<&str> = report
        .calls
        .iter()
        .filter(|c| c.item_id == "bulb-switch" && matches!(c.outcome, CallOutcome::Delivered { status: 200, .. }))
        .map(|c| c.payload.as_str())
        .collect();
    let expect_on = switch_calls.last().is_some_and(|p| p.contains("turn_on"));
    check(report.error_responses == 0, "every smart-home call succeeded")?;
    let status = client
        .get_status("bulb-1")
        .map_err(|e| Failure::Check(format!("check failed: cannot read bulb-1 status: {e}")))?;
    let power = serde_json::to_value(&status).ok().and_then(|v| v["power"].as_str().map(str::to_owned));
    emit(&format!("bulb-1 power: {}", power.as_deref().unwrap_or("?")));
    check(
        power.as_deref() == Some(if expect_on { "on" } else { "off" }),
        "bulb-1 power matches the last switch command",
    )?;
    if rig.mock.is_some() {
        let n = client.list_devices().map(|d| d.len()).unwrap_or(0);
        emit(&format!("mock cloud devices: {n}"));
        check(n == 27, "workshop roster lists 27 devices")?;
    }
    Ok(())
}
