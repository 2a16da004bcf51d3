#pragma once

#include "phenocnn/baselines.hpp"
#include "phenocnn/cnn.hpp"
#include "phenocnn/concepts.hpp"
#include "phenocnn/corpus.hpp"
#include "phenocnn/embeddings.hpp"
#include "phenocnn/errors.hpp"
#include "phenocnn/experiment.hpp"
#include "phenocnn/featurize.hpp"
#include "phenocnn/metrics.hpp"
#include "phenocnn/rng.hpp"
#include "phenocnn/saliency.hpp"
#include "phenocnn/synthetic.hpp"
#include "phenocnn/tensor.hpp"
