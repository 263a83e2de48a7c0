from quadrecon.cli import app

app(prog_name="quadrecon")
