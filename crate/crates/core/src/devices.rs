//! Simulated physical endpoints.
//!
//! A [`VirtualGpioBank`] stands in for a single-board computer's pin header;
//! [`DeviceState`] wraps one of five appliance state machines (fan, doorbell,
//! presence lamp, tone speaker, GPIO-driven LED) together with an append-only
//! event log. A [`DeviceRegistry`] owns a set of devices and exposes each one
//! as a named gateway route whose serialization key is the device key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envelope::{GatewayError, HandlerResponse, TriggerEnvelope};
use crate::gateway::{HandlerRegistration, RegistrationError};

pub const GPIO_PINS: usize = 32;
/// Pin driven by the LED on/off handler unless configured otherwise.
pub const DEFAULT_LED_PIN: u32 = 17;
pub const LOWEST_NOTE_HZ: f64 = 110.0;
pub const HIGHEST_NOTE_INDEX: u32 = 44;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("device fault: {0}")]
pub struct DeviceFault(pub String);

impl From<DeviceFault> for GatewayError {
    fn from(f: DeviceFault) -> Self {
        GatewayError::device_fault(f.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PinEvent {
    pub pin: u32,
    pub level: Level,
    pub order: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualGpioBank {
    pins: [Level; GPIO_PINS],
    events: Vec<PinEvent>,
}

impl Default for VirtualGpioBank {
    fn default() -> Self {
        Self {
            pins: [Level::Low; GPIO_PINS],
            events: Vec::new(),
        }
    }
}

impl VirtualGpioBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, pin: u32, level: Level) -> Result<(), DeviceFault> {
        let idx = check_pin(pin)?;
        self.pins[idx] = level;
        let order = self.events.len() as u64;
        self.events.push(PinEvent { pin, level, order });
        Ok(())
    }

    pub fn read(&self, pin: u32) -> Result<Level, DeviceFault> {
        Ok(self.pins[check_pin(pin)?])
    }

    pub fn events(&self) -> &[PinEvent] {
        &self.events
    }

    pub fn high_pins(&self) -> Vec<u32> {
        (0..GPIO_PINS as u32)
            .filter(|&p| self.pins[p as usize] == Level::High)
            .collect()
    }
}

fn check_pin(pin: u32) -> Result<usize, DeviceFault> {
    if (pin as usize) < GPIO_PINS {
        Ok(pin as usize)
    } else {
        Err(DeviceFault(format!("pin {pin} out of range 0..{GPIO_PINS}")))
    }
}

pub fn gpio_write(bank: &mut VirtualGpioBank, pin: u32, level: Level) -> Result<(), DeviceFault> {
    bank.write(pin, level)
}

pub fn gpio_read(bank: &VirtualGpioBank, pin: u32) -> Result<Level, DeviceFault> {
    bank.read(pin)
}

/// Equal-tempered frequency of `note_index` semitones above 110 Hz, rounded
/// to two decimals.
pub fn note_frequency(note_index: u32) -> Result<f64, DeviceFault> {
    if note_index > HIGHEST_NOTE_INDEX {
        return Err(DeviceFault(format!(
            "note index {note_index} out of range 0..={HIGHEST_NOTE_INDEX}"
        )));
    }
    let hz = LOWEST_NOTE_HZ * 2f64.powf(f64::from(note_index) / 12.0);
    Ok((hz * 100.0).round() / 100.0)
}

/// Default presence mapping: 20 % per user, saturating at 100.
pub fn linear_brightness(user_count: u32) -> u8 {
    user_count.saturating_mul(20).min(100) as u8
}

pub type BrightnessMap = Arc<dyn Fn(u32) -> u8 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DeviceKind {
    Fan,
    Doorbell,
    Lamp,
    ToneSpeaker,
    GpioBank,
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceKind::Fan => "fan",
            DeviceKind::Doorbell => "doorbell",
            DeviceKind::Lamp => "lamp",
            DeviceKind::ToneSpeaker => "toneSpeaker",
            DeviceKind::GpioBank => "gpioBank",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FanState {
    Stopped,
    Running,
}

/// Serializable view of a device's current state.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum StateSnapshot {
    Fan { power: FanState },
    Doorbell { chime_count: u64 },
    Lamp { brightness: u8 },
    ToneSpeaker { last_freq_hz: Option<f64> },
    GpioBank { high_pins: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceEvent {
    pub order: u64,
    pub command: String,
    pub state: StateSnapshot,
    /// Gateway request that caused this transition, if any.
    #[serde(skip)]
    pub request_id: Option<String>,
}

enum Machine {
    Fan(FanState),
    Doorbell { chime_count: u64 },
    Lamp { brightness: u8, mapping: BrightnessMap },
    ToneSpeaker { last_freq_hz: Option<f64> },
    GpioBank { bank: VirtualGpioBank, led_pin: u32 },
}

pub struct DeviceState {
    key: String,
    machine: Machine,
    events: Vec<DeviceEvent>,
}

impl fmt::Debug for DeviceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceState")
            .field("key", &self.key)
            .field("state", &self.snapshot())
            .field("events", &self.events.len())
            .finish()
    }
}

impl DeviceState {
    fn with_machine(key: impl Into<String>, machine: Machine) -> Self {
        Self {
            key: key.into(),
            machine,
            events: Vec::new(),
        }
    }

    pub fn fan(key: impl Into<String>) -> Self {
        Self::with_machine(key, Machine::Fan(FanState::Stopped))
    }

    pub fn doorbell(key: impl Into<String>) -> Self {
        Self::with_machine(key, Machine::Doorbell { chime_count: 0 })
    }

    pub fn lamp(key: impl Into<String>) -> Self {
        Self::lamp_with_mapping(key, Arc::new(linear_brightness))
    }

    pub fn lamp_with_mapping(key: impl Into<String>, mapping: BrightnessMap) -> Self {
        Self::with_machine(key, Machine::Lamp { brightness: 0, mapping })
    }

    pub fn tone_speaker(key: impl Into<String>) -> Self {
        Self::with_machine(key, Machine::ToneSpeaker { last_freq_hz: None })
    }

    pub fn gpio_bank(key: impl Into<String>, led_pin: u32) -> Result<Self, DeviceFault> {
        check_pin(led_pin)?;
        Ok(Self::with_machine(
            key,
            Machine::GpioBank {
                bank: VirtualGpioBank::new(),
                led_pin,
            },
        ))
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn kind(&self) -> DeviceKind {
        match self.machine {
            Machine::Fan(_) => DeviceKind::Fan,
            Machine::Doorbell { .. } => DeviceKind::Doorbell,
            Machine::Lamp { .. } => DeviceKind::Lamp,
            Machine::ToneSpeaker { .. } => DeviceKind::ToneSpeaker,
            Machine::GpioBank { .. } => DeviceKind::GpioBank,
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        match &self.machine {
            Machine::Fan(power) => StateSnapshot::Fan { power: *power },
            Machine::Doorbell { chime_count } => StateSnapshot::Doorbell {
                chime_count: *chime_count,
            },
            Machine::Lamp { brightness, .. } => StateSnapshot::Lamp {
                brightness: *brightness,
            },
            Machine::ToneSpeaker { last_freq_hz } => StateSnapshot::ToneSpeaker {
                last_freq_hz: *last_freq_hz,
            },
            Machine::GpioBank { bank, .. } => StateSnapshot::GpioBank {
                high_pins: bank.high_pins(),
            },
        }
    }

    pub fn events(&self) -> &[DeviceEvent] {
        &self.events
    }

    pub fn fan_state(&self) -> Option<FanState> {
        match self.machine {
            Machine::Fan(s) => Some(s),
            _ => None,
        }
    }

    pub fn chime_count(&self) -> Option<u64> {
        match self.machine {
            Machine::Doorbell { chime_count } => Some(chime_count),
            _ => None,
        }
    }

    pub fn brightness(&self) -> Option<u8> {
        match self.machine {
            Machine::Lamp { brightness, .. } => Some(brightness),
            _ => None,
        }
    }

    pub fn last_freq_hz(&self) -> Option<f64> {
        match self.machine {
            Machine::ToneSpeaker { last_freq_hz } => last_freq_hz,
            _ => None,
        }
    }

    pub fn gpio(&self) -> Option<&VirtualGpioBank> {
        match &self.machine {
            Machine::GpioBank { bank, .. } => Some(bank),
            _ => None,
        }
    }

    fn record(&mut self, command: &str, request_id: Option<&str>) -> StateSnapshot {
        let state = self.snapshot();
        self.events.push(DeviceEvent {
            order: self.events.len() as u64,
            command: command.to_owned(),
            state: state.clone(),
            request_id: request_id.map(str::to_owned),
        });
        state
    }

    fn wrong_kind(&self, op: &str) -> DeviceFault {
        DeviceFault(format!("{op} is not supported by {} device `{}`", self.kind(), self.key))
    }

    /// Exactly `"on"` runs the fan; anything else stops it.
    pub fn fan_command(&mut self, payload: &str) -> Result<StateSnapshot, DeviceFault> {
        self.fan_command_for(payload, None)
    }

    fn fan_command_for(&mut self, payload: &str, rid: Option<&str>) -> Result<StateSnapshot, DeviceFault> {
        let Machine::Fan(power) = &mut self.machine else {
            return Err(self.wrong_kind("fan_command"));
        };
        *power = if payload == "on" {
            FanState::Running
        } else {
            FanState::Stopped
        };
        Ok(self.record(payload, rid))
    }

    pub fn doorbell_ring(&mut self) -> Result<StateSnapshot, DeviceFault> {
        self.doorbell_ring_for("ring", None)
    }

    fn doorbell_ring_for(&mut self, command: &str, rid: Option<&str>) -> Result<StateSnapshot, DeviceFault> {
        let Machine::Doorbell { chime_count } = &mut self.machine else {
            return Err(self.wrong_kind("doorbell_ring"));
        };
        *chime_count += 1;
        Ok(self.record(command, rid))
    }

    pub fn lamp_set_from_presence(&mut self, user_count: u32) -> Result<StateSnapshot, DeviceFault> {
        self.lamp_set_for(user_count, None)
    }

    fn lamp_set_for(&mut self, user_count: u32, rid: Option<&str>) -> Result<StateSnapshot, DeviceFault> {
        let Machine::Lamp { brightness, mapping } = &mut self.machine else {
            return Err(self.wrong_kind("lamp_set_from_presence"));
        };
        *brightness = mapping(user_count).min(100);
        Ok(self.record(&user_count.to_string(), rid))
    }

    pub fn tone_play(&mut self, note_index: u32) -> Result<f64, DeviceFault> {
        self.tone_play_for(note_index, None).map(|(hz, _)| hz)
    }

    fn tone_play_for(&mut self, note_index: u32, rid: Option<&str>) -> Result<(f64, StateSnapshot), DeviceFault> {
        if !matches!(self.machine, Machine::ToneSpeaker { .. }) {
            return Err(self.wrong_kind("tone_play"));
        }
        let hz = note_frequency(note_index)?;
        if let Machine::ToneSpeaker { last_freq_hz } = &mut self.machine {
            *last_freq_hz = Some(hz);
        }
        Ok((hz, self.record(&note_index.to_string(), rid)))
    }

    pub fn gpio_write(&mut self, pin: u32, level: Level) -> Result<StateSnapshot, DeviceFault> {
        self.gpio_write_for(pin, level, &format!("{pin}={level:?}"), None)
    }

    fn gpio_write_for(
        &mut self,
        pin: u32,
        level: Level,
        command: &str,
        rid: Option<&str>,
    ) -> Result<StateSnapshot, DeviceFault> {
        let Machine::GpioBank { bank, .. } = &mut self.machine else {
            return Err(self.wrong_kind("gpio_write"));
        };
        bank.write(pin, level)?;
        Ok(self.record(command, rid))
    }

    pub fn gpio_read(&self, pin: u32) -> Result<Level, DeviceFault> {
        match &self.machine {
            Machine::GpioBank { bank, .. } => bank.read(pin),
            _ => Err(self.wrong_kind("gpio_read")),
        }
    }

    /// Decodes a gateway payload according to the device kind and applies it.
    ///
    /// | kind        | payload                                   |
    /// |-------------|-------------------------------------------|
    /// | fan         | `"on"` runs, anything else stops          |
    /// | doorbell    | any payload rings once                    |
    /// | lamp        | decimal user count                        |
    /// | toneSpeaker | decimal note index `0..=44`               |
    /// | gpioBank    | `"on"` drives the LED pin high, else low  |
    pub fn apply(&mut self, payload: &str, request_id: Option<&str>) -> Result<StateSnapshot, GatewayError> {
        let rid = request_id;
        match self.kind() {
            DeviceKind::Fan => Ok(self.fan_command_for(payload, rid)?),
            DeviceKind::Doorbell => Ok(self.doorbell_ring_for(payload, rid)?),
            DeviceKind::Lamp => {
                let count = parse_count(payload, "user count")?;
                Ok(self.lamp_set_for(count, rid)?)
            }
            DeviceKind::ToneSpeaker => {
                let note = parse_count(payload, "note index")?;
                Ok(self.tone_play_for(note, rid)?.1)
            }
            DeviceKind::GpioBank => {
                let Machine::GpioBank { led_pin, .. } = self.machine else {
                    unreachable!()
                };
                let level = if payload == "on" { Level::High } else { Level::Low };
                Ok(self.gpio_write_for(led_pin, level, payload, rid)?)
            }
        }
    }

    /// One JSON object per event: `{"deviceKey","order","command","state"}`.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            let line = serde_json::json!({
                "deviceKey": self.key,
                "order": ev.order,
                "command": ev.command,
                "state": ev.state,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

fn parse_count(payload: &str, what: &str) -> Result<u32, GatewayError> {
    payload
        .trim()
        .parse::<u32>()
        .map_err(|_| GatewayError::malformed_payload(format!("expected a {what}, got `{payload}`")))
}

/// One entry of a device registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceSpec {
    #[serde(alias = "device_key")]
    pub device_key: String,
    pub kind: DeviceKind,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum DeviceConfigError {
    #[error("cannot read device registry {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid device registry: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate device key `{0}`")]
    DuplicateKey(String),
    #[error("device `{key}`: {message}")]
    Params { key: String, message: String },
}

pub type SharedDevice = Arc<Mutex<DeviceState>>;

/// Devices addressable by key.
#[derive(Clone, Default)]
pub struct DeviceRegistry {
    devices: BTreeMap<String, SharedDevice>,
}

impl DeviceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fan, doorbell, presence lamp, piano speaker and an LED on pin 17.
    pub fn demo() -> Self {
        let mut reg = Self::new();
        reg.insert(DeviceState::fan("fan")).unwrap();
        reg.insert(DeviceState::doorbell("doorbell")).unwrap();
        reg.insert(DeviceState::lamp("lamp")).unwrap();
        reg.insert(DeviceState::tone_speaker("piano")).unwrap();
        reg.insert(DeviceState::gpio_bank("led", DEFAULT_LED_PIN).unwrap()).unwrap();
        reg
    }

    pub fn from_specs(specs: &[DeviceSpec]) -> Result<Self, DeviceConfigError> {
        let mut reg = Self::new();
        for spec in specs {
            reg.insert(build_device(spec)?)?;
        }
        Ok(reg)
    }

    pub fn from_json(text: &str) -> Result<Self, DeviceConfigError> {
        let specs: Vec<DeviceSpec> = serde_json::from_str(text)?;
        Self::from_specs(&specs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DeviceConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DeviceConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn insert(&mut self, device: DeviceState) -> Result<SharedDevice, DeviceConfigError> {
        if self.devices.contains_key(device.key()) {
            return Err(DeviceConfigError::DuplicateKey(device.key().to_owned()));
        }
        let key = device.key().to_owned();
        let shared = Arc::new(Mutex::new(device));
        self.devices.insert(key, shared.clone());
        Ok(shared)
    }

    pub fn get(&self, key: &str) -> Option<SharedDevice> {
        self.devices.get(key).cloned()
    }

    /// Locks one device. Panics on an unknown key.
    pub fn lock(&self, key: &str) -> MutexGuard<'_, DeviceState> {
        self.devices
            .get(key)
            .unwrap_or_else(|| panic!("no device `{key}`"))
            .lock()
            .unwrap_or_else(|p| p.into_inner())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.devices.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    /// Gateway handler driving device `key`; replies with the new state as
    /// canonical JSON.
    pub fn handler(&self, key: &str) -> Option<impl Fn(&TriggerEnvelope) -> HandlerResponse + Send + Sync + 'static> {
        let device = self.get(key)?;
        Some(move |env: &TriggerEnvelope| -> HandlerResponse {
            let mut dev = device.lock().unwrap_or_else(|p| p.into_inner());
            match dev.apply(&env.request, Some(&env.request_id)) {
                Ok(state) => HandlerResponse::ok(serde_json::to_value(state).unwrap_or(Value::Null)),
                Err(e) => HandlerResponse::Error(e),
            }
        })
    }

    /// Registers every device as the named route `<device_key>`.
    pub fn install(&self, mut reg: HandlerRegistration) -> Result<HandlerRegistration, RegistrationError> {
        for key in self.devices.keys() {
            let handler = self.handler(key).expect("key comes from the map");
            reg = reg.route_envelope(key, handler)?;
        }
        Ok(reg)
    }

    /// Event logs of all devices, keys in sorted order.
    pub fn export_jsonl(&self) -> String {
        self.devices
            .values()
            .map(|d| d.lock().unwrap_or_else(|p| p.into_inner()).export_jsonl())
            .collect()
    }
}

fn build_device(spec: &DeviceSpec) -> Result<DeviceState, DeviceConfigError> {
    let key = spec.device_key.clone();
    let bad = |message: String| DeviceConfigError::Params {
        key: key.clone(),
        message,
    };
    if key.is_empty() {
        return Err(bad("device key is empty".into()));
    }
    let param_u32 = |name: &str| -> Result<Option<u32>, DeviceConfigError> {
        match spec.params.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .map(Some)
                .ok_or_else(|| bad(format!("`{name}` must be a non-negative integer"))),
        }
    };
    Ok(match spec.kind {
        DeviceKind::Fan => DeviceState::fan(key.clone()),
        DeviceKind::Doorbell => DeviceState::doorbell(key.clone()),
        DeviceKind::ToneSpeaker => DeviceState::tone_speaker(key.clone()),
        DeviceKind::Lamp => match param_u32("percentPerUser")? {
            None => DeviceState::lamp(key.clone()),
            Some(step) => DeviceState::lamp_with_mapping(
                key.clone(),
                Arc::new(move |n: u32| n.saturating_mul(step).min(100) as u8),
            ),
        },
        DeviceKind::GpioBank => {
            let pin = param_u32("ledPin")?.unwrap_or(DEFAULT_LED_PIN);
            DeviceState::gpio_bank(key.clone(), pin).map_err(|e| bad(e.0))?
        }
    })
}
