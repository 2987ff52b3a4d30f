from os import cpu_count, getenv

from dotenv import find_dotenv, load_dotenv

# First, load the environment variables from the .env file
load_dotenv(
    find_dotenv(
        # Use the current working directory from where the command is run
        usecwd=True,
    )
)

# Detect if the code is running in a CI environment
# See: https://stackoverflow.com/a/75223617
IS_CI = getenv("CI", "").lower() == "true"


def _threads() -> int:
    """
    Parallelism cap from `MMCD_THREADS`.

    Zero, unset or garbage means one worker per CPU.
    """
    try:
        value = int(getenv("MMCD_THREADS", "0") or 0)
    except ValueError:
        value = 0
    if value > 0:
        return value
    return cpu_count() or 1


THREADS = _threads()
