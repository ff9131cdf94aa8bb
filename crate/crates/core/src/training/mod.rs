//! Teacher pretraining, student distillation training and inference.

pub mod artifacts;
pub mod config;
pub mod stain;
pub mod student;
pub mod teacher;

pub use config::{lr_schedule, Objective, TeacherTrainConfig, TrainConfig, UpdateOrder, Variant};
pub use stain::{stain, stain_batch};
pub use student::{
    generator_objective, list_checkpoints, load_student, mean_kd, teacher_outputs, train_student, RunOptions,
    StudentRun, StudentTrainer,
};
pub use teacher::{load_teacher, pretrain_teacher, teacher_l1, TeacherRun};

/// Derives an independent seed for `(stream, index)` from a base seed.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xd1b5_4a32_d192_ed03))
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
