#pragma once

#include "insta/errors.hpp"
#include "insta/hashing.hpp"
#include "insta/rng.hpp"
#include "insta/placeholders.hpp"
#include "insta/corpus.hpp"
#include "insta/refine.hpp"
#include "insta/embed.hpp"
#include "insta/remote_backend.hpp"
#include "insta/align.hpp"
#include "insta/select.hpp"
#include "insta/mixture.hpp"
#include "insta/config.hpp"
