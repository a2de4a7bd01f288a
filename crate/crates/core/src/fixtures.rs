//! Scenario and configuration files shipped under `fixtures/`, embedded so
//! demos work from any directory.

use crate::world::{Scenario, ScenarioError};

pub const FAN_3USERS: &str = include_str!("../fixtures/fan_3users.json");
pub const FAN_DEMO: &str = include_str!("../fixtures/fan_demo.json");
pub const DOORBELL_OWNER_OFFLINE: &str = include_str!("../fixtures/doorbell_owner_offline.json");
pub const PRESENCE_LAMP: &str = include_str!("../fixtures/presence_lamp.json");
pub const PIANO: &str = include_str!("../fixtures/piano.json");
pub const SMARTHOME: &str = include_str!("../fixtures/smarthome.json");
pub const EMPTY_SCENARIO: &str = include_str!("../fixtures/empty.json");

/// Mock smart-home cloud with no devices.
pub const SMARTHOME_EMPTY: &str = include_str!("../fixtures/smarthome_empty.json");
/// Device registry equivalent to [`crate::devices::DeviceRegistry::demo`].
pub const DEVICES: &str = include_str!("../fixtures/devices.json");

/// `(file name, contents)` for every scenario fixture.
pub const SCENARIOS: [(&str, &str); 7] = [
    ("fan_3users.json", FAN_3USERS),
    ("fan_demo.json", FAN_DEMO),
    ("doorbell_owner_offline.json", DOORBELL_OWNER_OFFLINE),
    ("presence_lamp.json", PRESENCE_LAMP),
    ("piano.json", PIANO),
    ("smarthome.json", SMARTHOME),
    ("empty.json", EMPTY_SCENARIO),
];

pub fn scenario(name: &str) -> Result<Scenario, ScenarioError> {
    let text = SCENARIOS
        .iter()
        .find(|(file, _)| *file == name || file.trim_end_matches(".json") == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| ScenarioError::Invalid {
            line: 0,
            message: format!("no built-in scenario named `{name}`"),
        })?;
    Scenario::from_json(text)
}
