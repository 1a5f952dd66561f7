//! Joint optimization of the scene field and the rig calibration.

pub mod adam;
pub mod calib;
pub mod train;

pub use adam::{adam_step, AdamState, OptimError};
pub use calib::{CalibError, CalibrationState, SensorCalib, SensorCalibGrad};
pub use train::{
    average_last_snapshots, calibrate, lr_at_epoch, CalibrationResult, EpochReport, TrainError,
    TrainOptions, TrainSchedule, TrainSetup, Trainer,
};
