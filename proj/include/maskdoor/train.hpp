#pragma once

#include <optional>
#include <string>
#include <vector>

#include "maskdoor/detector.hpp"
#include "maskdoor/poison.hpp"

namespace maskdoor::train {

using core::AnnotatedImage;

enum class Stage { Joint, Frozen };

std::string to_string(Stage s);

struct TrainConfig {
    double alpha = 0.5;
    double beta = 0.5;
    double epsilon_initial = 0.05;
    double epsilon_final = 0.02;
    int anneal_epochs = -1;       // epoch at which epsilon reaches final; -1 = epochs/2
    double stage_switch_tol = 0.05;
    int stage_switch_patience = 4;
    int freeze_epoch_cap = -1;    // hard fallback for the stage switch; -1 = 3*epochs/4
    int epochs = 20;
    int batch_size = 16;
    double lr_theta = 1e-3;
    double lr_xi = 1e-4;
    double poison_fraction = 1.0; // fraction of batch samples carrying the poisoned term
    int val_count = 96;
    uint64_t seed = 1234;
    det::DetectorConfig detector;

    // Fills the -1 sentinels from `epochs` and checks all invariants.
    void resolve_and_validate();
};

struct EpochRecord {
    int epoch = 0;
    double clean_loss = 0.0;
    double poison_loss = 0.0;
    double combined_loss = 0.0;
    double epsilon = 0.0;
    Stage stage = Stage::Joint;
    double benign_map = 0.0;
    double asr = -1.0;  // -1 when the validation slice had no triggers
    size_t skipped = 0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::string to_csv() const;
};

// alpha * L_clean + beta * L_poison.
double combined_loss(double l_clean, double l_poison, double alpha, double beta);

// True iff the last `patience` history entries changed by less than tol
// relative to their predecessor (stabilization of the poisoned loss).
bool stage_switch(const std::vector<double>& history, double tol, int patience);

// Linear epsilon schedule: epsilon_initial at epoch 0 down to epsilon_final
// at anneal_epochs, constant afterwards.
double anneal_epsilon(int epoch, const TrainConfig& config);

struct StepLosses {
    double clean = 0.0;
    double poison = 0.0;
    double combined = 0.0;
    size_t n_clean = 0;
    size_t n_poisoned = 0;
    size_t skipped = 0;
    double max_pert_inf = 0.0;
};

struct BatchItem {
    const AnnotatedImage* sample = nullptr;
    Rng plan_rng{0};
    bool poisoned = true;  // carries the poisoned loss term this step
};

// One simultaneous update: theta on the combined loss, xi on the poisoned
// term only (Joint stage); xi untouched when Frozen.
StepLosses joint_step(det::TinyDet& model, trigger::TriggerGenerator& gen,
                      nn::Adam& opt_theta, nn::Adam& opt_xi,
                      const std::vector<BatchItem>& batch,
                      const poison::PoisonSpec& spec, const TrainConfig& config,
                      Stage stage);

struct TrainResult {
    det::TinyDet model;
    trigger::TriggerGenerator generator;
    TrainLog log;
    int stage_switch_epoch = -1;  // first Frozen epoch, -1 if never switched
};

// Full joint training run. Validation metrics are computed on val_samples
// when given, otherwise on a leading slice of the training set. Checkpoints
// and the CSV log are written under out_dir when non-empty.
TrainResult train(const std::vector<AnnotatedImage>& dataset,
                  const poison::PoisonSpec& spec, TrainConfig config,
                  const std::vector<AnnotatedImage>* val_samples = nullptr,
                  const std::string& out_dir = "");

}  // namespace maskdoor::train
