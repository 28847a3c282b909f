"""Platoon trajectory generation with IDM and scheduled-sampling LSTM car-following models."""

from .core import DX_MIN, NumericError, ObservationFeatures, Platoon, Trajectory, VehicleState, integrate_step
from .evaluation import MetricsReport, generate_platoon, generate_platoons, mae, mmaae
from .models import IdmModel, IdmParams, idm_acceleration
from .network import LstmModel, NetworkParams, init_params, load_params, save_params
from .sampling import DecaySchedule, epsilon
from .training import TrainConfig, fit

__version__ = "0.1.0"
