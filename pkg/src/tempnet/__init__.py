"""Time-to-event margin propagation (TEMP) spiking networks.

Modules: ``core`` (neuron), ``network`` (differential layers), ``train``
(spike-time gradients), ``aer`` (routing fabric), ``lif`` (integrate-and-fire
references), ``analysis``/``plot``/``cli`` (experiments).
"""

__version__ = "0.1.0"

from .core import NEVER, NeuronParams, Polarity, SpikeEvent, solve_spike_time, step_event
from .network import Network, NetworkSpec, dense, conv2d, maxpool

__all__ = ["NEVER", "NeuronParams", "Polarity", "SpikeEvent", "solve_spike_time", "step_event",
           "Network", "NetworkSpec", "dense", "conv2d", "maxpool", "__version__"]
