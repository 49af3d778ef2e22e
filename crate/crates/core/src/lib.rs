//! Coordinated multi-level voltage and reactive power control for MV/LV
//! distribution grids.
//!
//! The crate is organised bottom-up: [`grid`] holds the network model,
//! [`powerflow`] the AC solver and sensitivities, [`control`] the local
//! inverter and tap-changer laws, [`flex`] flexibility aggregation and
//! setpoint allocation, [`comms`] and [`coordination`] the simulated
//! multi-level protocol, and [`scenario`] the time-series runner.

pub mod comms;
pub mod control;
pub mod coordination;
pub mod fixture;
pub mod flex;
pub mod grid;
pub mod powerflow;
pub mod scenario;

pub use comms::{Bus, CommsError, DeliveryRecord, LinkModel, MessageKind, Outage, Step};
pub use control::{Capability, ControlCharacteristic, OltcState};
pub use coordination::{CoordError, CoordinationConfig, Message, Mode, Payload, System};
pub use flex::{
    allocate_setpoints, check_constraints, decompose_by_level, flex_range_oracle, flex_range_sensitivity, ConstraintSet,
    FlexError, FlexRange, SetpointBundle, Violation,
};
pub use grid::{interface_of, load_network, save_network, validate, InterfaceSpec, Network, ValidationReport};
pub use powerflow::{interface_q, solve_power_flow, Dispatch, PfOptions, PowerFlowSolution, TapVector};
