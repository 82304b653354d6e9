#pragma once

#include "kpn/checkpoint.hpp"
#include "kpn/cli.hpp"
#include "kpn/corpus.hpp"
#include "kpn/errors.hpp"
#include "kpn/evaluate.hpp"
#include "kpn/gradcheck.hpp"
#include "kpn/metrics.hpp"
#include "kpn/model.hpp"
#include "kpn/optim.hpp"
#include "kpn/retriever.hpp"
#include "kpn/rng.hpp"
#include "kpn/selfcheck.hpp"
#include "kpn/service.hpp"
#include "kpn/synth.hpp"
#include "kpn/tensor.hpp"
#include "kpn/text.hpp"
#include "kpn/trainer.hpp"
#include "kpn/vocab.hpp"
#include "kpn/weaklabel.hpp"
