# Model Parameters
hidden_width = 64
head_init_range = 0.01  # new head rows ~ U(-0.01, 0.01)
head_init = "small_uniform"
head_bias = True

# Distillation Parameters
temperature = 2.0
kd_coeff = 1.0
aux_coeff = 1.0

# Dynamic Intervention Weight Alignment Parameters
eta_min = 0.2
tau = 5.0

# Training Parameters
epochs = 30
batch_size = 32
learning_rate = 0.05
momentum = 0.9
weight_decay = 5e-4

# Replay Buffer Parameters
buffer_budget = 200
buffer_selection = "herding"
herding_space = "feature"

# Synthetic Dataset Parameters
num_classes = 20
dim = 16
train_per_class = 100
test_per_class = 50
separation = 3.0
test_fraction = 0.2  # only used for imported feature matrices

# Schedule Parameters
num_steps = 4
min_per_step = 1
extreme_tail = (1, 2)  # counts drawn for every step after the first
fluctuation_attempts = 1000
