"""Ray-cloud to body-motion regression: network, objective, training, oracle."""
from .loss import forward_kinematics_t, loss, motion_loss
from .net import InputError, LampNet, predict, to_body_states
from .oracle import triangulate_oracle
from .training import (CheckpointError, DivergenceError, TrainState, fixed_stream,
                       load_checkpoint, new_state, save_checkpoint, simulated_stream, train)
