#pragma once

#include "msa/core.hpp"
#include "msa/tinynn.hpp"
#include "msa/dataset.hpp"
#include "msa/classifier.hpp"
#include "msa/dual.hpp"
#include "msa/proposal.hpp"
#include "msa/controller.hpp"
#include "msa/attack.hpp"
#include "msa/metatrain.hpp"
#include "msa/container.hpp"
#include "msa/synthetic.hpp"
#include "msa/report.hpp"
#include "msa/config.hpp"
#include "msa/harness.hpp"
