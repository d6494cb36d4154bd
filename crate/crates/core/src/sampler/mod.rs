//! Flow-ODE integration on `t ∈ [0, 1]`, noise at `t = 0` and data at `t = 1`.

mod diagnostics;
mod schedule;
mod solvers;

pub use diagnostics::{
    curvature_profile, diagnose, truncation_error_profile, write_diagnose_csv, DiagnoseRow,
};
pub use schedule::{
    make_schedule, sigmoid_raw, warp, write_schedule_csv, Form, ScheduleKind, ScheduleSpec,
    Timesteps,
};
pub use solvers::{
    cfg_velocity, euler_sample, midpoint_sample, rk_sample, sample, ButcherTableau, Solver,
};
